#pragma once

#include "cachesteer/common.hpp"
#include "cachesteer/tokenizer.hpp"
#include "cachesteer/model.hpp"
#include "cachesteer/lm.hpp"
#include "cachesteer/cache_grad.hpp"
#include "cachesteer/scorer.hpp"
#include "cachesteer/remote_scorer.hpp"
#include "cachesteer/guidance.hpp"
#include "cachesteer/decoder.hpp"
#include "cachesteer/arithmetic.hpp"
#include "cachesteer/vr_bench.hpp"
#include "cachesteer/run_config.hpp"
