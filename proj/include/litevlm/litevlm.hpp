#pragma once

#include "litevlm/corpus/corpus_io.hpp"
#include "litevlm/corpus/query.hpp"
#include "litevlm/corpus/scene.hpp"
#include "litevlm/geometry.hpp"
#include "litevlm/nn/autograd.hpp"
#include "litevlm/nn/kernels.hpp"
#include "litevlm/nn/params.hpp"
#include "litevlm/nn/rng.hpp"
#include "litevlm/nn/tensor.hpp"
#include "litevlm/nn/transformer.hpp"
#include "litevlm/patchsel/selector.hpp"
#include "litevlm/pipeline/bench.hpp"
#include "litevlm/pipeline/config.hpp"
#include "litevlm/pipeline/cost_model.hpp"
#include "litevlm/pipeline/pipeline.hpp"
#include "litevlm/spec/decoder.hpp"
#include "litevlm/spec/distill.hpp"
#include "litevlm/text/vocab.hpp"
#include "litevlm/toksel/token_selector.hpp"
#include "litevlm/verify.hpp"
#include "litevlm/vision/frontend.hpp"
