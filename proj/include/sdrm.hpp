// SPDX-License-Identifier: Apache-2.0
//
// Umbrella header for the sdrm toolkit.

#pragma once

#include "sdrm/checkpoint.hpp"
#include "sdrm/common.hpp"
#include "sdrm/dataset.hpp"
#include "sdrm/diffusion.hpp"
#include "sdrm/hpo.hpp"
#include "sdrm/metrics.hpp"
#include "sdrm/multivae.hpp"
#include "sdrm/pipeline.hpp"
#include "sdrm/postprocess.hpp"
#include "sdrm/privacy_audit.hpp"
#include "sdrm/recsys_eval.hpp"
#include "sdrm/tensor_nn.hpp"
