#pragma once

#include "sylph/checkpoint.hpp"
#include "sylph/config.hpp"
#include "sylph/dataset.hpp"
#include "sylph/detector.hpp"
#include "sylph/eval.hpp"
#include "sylph/geometry.hpp"
#include "sylph/gradcheck.hpp"
#include "sylph/gradcheck_suite.hpp"
#include "sylph/hypernet.hpp"
#include "sylph/image.hpp"
#include "sylph/losses.hpp"
#include "sylph/model.hpp"
#include "sylph/ops.hpp"
#include "sylph/optim.hpp"
#include "sylph/rng.hpp"
#include "sylph/synth.hpp"
#include "sylph/tensor.hpp"
#include "sylph/train.hpp"
#include "sylph/pipeline.hpp"
