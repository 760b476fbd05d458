#pragma once

// Umbrella header: the full low-light enhancement stack.

#include "cfwd/autodiff.hpp"
#include "cfwd/common.hpp"
#include "cfwd/denoiser.hpp"
#include "cfwd/diffusion.hpp"
#include "cfwd/hfpm.hpp"
#include "cfwd/imaging.hpp"
#include "cfwd/nn.hpp"
#include "cfwd/pipeline.hpp"
#include "cfwd/serialize.hpp"
#include "cfwd/spectral.hpp"
#include "cfwd/tensor.hpp"
#include "cfwd/vlg.hpp"
#include "cfwd/wavelet.hpp"
