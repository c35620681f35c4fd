#pragma once

#include "mixdiff/autodiff.hpp"
#include "mixdiff/checkpoint.hpp"
#include "mixdiff/classify.hpp"
#include "mixdiff/dataio.hpp"
#include "mixdiff/denoiser.hpp"
#include "mixdiff/diffusion.hpp"
#include "mixdiff/embedspace.hpp"
#include "mixdiff/error.hpp"
#include "mixdiff/gradcheck.hpp"
#include "mixdiff/metrics.hpp"
#include "mixdiff/model.hpp"
#include "mixdiff/random.hpp"
#include "mixdiff/report.hpp"
#include "mixdiff/schedule.hpp"
#include "mixdiff/tensor.hpp"
#include "mixdiff/training.hpp"
