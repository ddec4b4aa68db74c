#pragma once

#include "qflow/captions.hpp"
#include "qflow/config.hpp"
#include "qflow/errors.hpp"
#include "qflow/evaluation.hpp"
#include "qflow/grpo.hpp"
#include "qflow/paradigms.hpp"
#include "qflow/parallel.hpp"
#include "qflow/policy.hpp"
#include "qflow/rewards.hpp"
#include "qflow/rng.hpp"
#include "qflow/synthdata.hpp"
#include "qflow/textio.hpp"
