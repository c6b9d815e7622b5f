#pragma once

#include "lastlab/adapters.hpp"
#include "lastlab/autograd.hpp"
#include "lastlab/checkpoint.hpp"
#include "lastlab/config.hpp"
#include "lastlab/errors.hpp"
#include "lastlab/eval.hpp"
#include "lastlab/grpo.hpp"
#include "lastlab/harness.hpp"
#include "lastlab/io.hpp"
#include "lastlab/layout.hpp"
#include "lastlab/metrics.hpp"
#include "lastlab/microworld.hpp"
#include "lastlab/model.hpp"
#include "lastlab/optim.hpp"
#include "lastlab/policy.hpp"
#include "lastlab/rng.hpp"
#include "lastlab/scene.hpp"
#include "lastlab/sft.hpp"
#include "lastlab/tokenizer.hpp"
