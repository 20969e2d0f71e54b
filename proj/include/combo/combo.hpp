// Copyright (c) 2026 The combo-avs Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "combo/tensor.hpp"
#include "combo/ops.hpp"
#include "combo/optim.hpp"
#include "combo/gradcheck.hpp"
#include "combo/rng.hpp"
#include "combo/serialize.hpp"
#include "combo/params.hpp"
#include "combo/image_io.hpp"
#include "combo/maskige.hpp"
#include "combo/siam_encoder.hpp"
#include "combo/pixel_decoder.hpp"
#include "combo/bilateral_fusion.hpp"
#include "combo/query_decoder.hpp"
#include "combo/hungarian.hpp"
#include "combo/objectives.hpp"
#include "combo/inference.hpp"
#include "combo/metrics.hpp"
#include "combo/config.hpp"
#include "combo/parallel.hpp"
#include "combo/synthetic.hpp"
#include "combo/model.hpp"
#include "combo/train.hpp"
#include "combo/evaluate.hpp"
#include "combo/gradcheck_suite.hpp"
