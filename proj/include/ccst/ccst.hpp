#pragma once

#include "ccst/common.hpp"
#include "ccst/dataio.hpp"
#include "ccst/error.hpp"
#include "ccst/eval.hpp"
#include "ccst/hnsw.hpp"
#include "ccst/inrp.hpp"
#include "ccst/model.hpp"
#include "ccst/quant.hpp"
#include "ccst/synthetic.hpp"
#include "ccst/tensor.hpp"
#include "ccst/topk.hpp"
#include "ccst/trainer.hpp"
