#pragma once

#include "iflow/autodiff.hpp"
#include "iflow/common.hpp"
#include "iflow/config.hpp"
#include "iflow/error.hpp"
#include "iflow/eval.hpp"
#include "iflow/flow.hpp"
#include "iflow/hungarian.hpp"
#include "iflow/io.hpp"
#include "iflow/made.hpp"
#include "iflow/plot.hpp"
#include "iflow/prior.hpp"
#include "iflow/report.hpp"
#include "iflow/spline.hpp"
#include "iflow/synth.hpp"
#include "iflow/train.hpp"
