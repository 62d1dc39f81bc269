#pragma once

#include "dflens/checkpoint.hpp"
#include "dflens/denoiser.hpp"
#include "dflens/diffusion.hpp"
#include "dflens/error.hpp"
#include "dflens/evaluation.hpp"
#include "dflens/experiment.hpp"
#include "dflens/generate.hpp"
#include "dflens/image.hpp"
#include "dflens/parallel.hpp"
#include "dflens/rng.hpp"
#include "dflens/saliency.hpp"
#include "dflens/synth.hpp"
#include "dflens/tensor.hpp"
#include "dflens/tokens.hpp"
#include "dflens/train.hpp"
