#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "qflow/commands.hpp"

int main(int argc, char** argv) {
  CLI::App app{"qflow: caption-then-score quality assessment with group-relative policy optimization"};
  app.require_subcommand(1);

  std::string config, out, out_dir, ckpt, data, modes = "image,text,text_stripped", vocab, grid;

  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic quality dataset");
  gen->add_option("--config", config, "Config file")->required();
  gen->add_option("--out", out, "Output dataset path")->required();

  auto* tr = app.add_subcommand("train", "Train a policy");
  tr->add_option("--config", config, "Config file")->required();
  tr->add_option("--out-dir", out_dir, "Output directory")->required();

  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint");
  ev->add_option("--ckpt", ckpt, "Checkpoint file")->required();
  ev->add_option("--data", data, "Dataset to score")->required();
  ev->add_option("--modes", modes, "Comma-separated: image,text,text_stripped");
  ev->add_option("--out-dir", out_dir, "Output directory")->required();
  ev->add_option("--vocab", vocab, "Vocabulary file (default vocabulary when omitted)");

  auto* ab = app.add_subcommand("ablate", "Train and evaluate one model per (alpha,beta) cell");
  ab->add_option("--config", config, "Config file")->required();
  ab->add_option("--grid", grid, "Cells as 'alpha,beta;alpha,beta;...'")->required();
  ab->add_option("--out-dir", out_dir, "Output directory")->required();

  CLI11_PARSE(app, argc, argv);

  using namespace qflow::cli;
  if (gen->parsed()) return cmd_gen_data(config, out, std::cout, std::cerr);
  if (tr->parsed()) return cmd_train(config, out_dir, std::cout, std::cerr);
  if (ev->parsed()) return cmd_eval(ckpt, data, modes, out_dir, vocab, std::cout, std::cerr);
  if (ab->parsed()) return cmd_ablate(config, grid, out_dir, std::cout, std::cerr);
  return 1;
}
