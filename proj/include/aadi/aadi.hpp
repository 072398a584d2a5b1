/*
 * SPDX-License-Identifier: Apache-2.0
 */
#pragma once

/// @file aadi.hpp
/// @brief Umbrella header.

#include "aadi/commands.hpp"
#include "aadi/geometry.hpp"
#include "aadi/head.hpp"
#include "aadi/io/coco.hpp"
#include "aadi/io/config.hpp"
#include "aadi/io/metrics_doc.hpp"
#include "aadi/io/svg.hpp"
#include "aadi/io/synthetic.hpp"
#include "aadi/metrics.hpp"
#include "aadi/pipeline.hpp"
#include "aadi/random.hpp"
#include "aadi/tensor.hpp"
