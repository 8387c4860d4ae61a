/*
 * Copyright 2026 The GPF Authors
 * SPDX-License-Identifier: Apache-2.0
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 * http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#pragma once

// Everything in one include.

#include "gpf/common.hpp"
#include "gpf/config.hpp"
#include "gpf/core_types.hpp"
#include "gpf/depth_visibility.hpp"
#include "gpf/edit_ops.hpp"
#include "gpf/feature_pipeline.hpp"
#include "gpf/io.hpp"
#include "gpf/kernel_renderer.hpp"
#include "gpf/metrics.hpp"
#include "gpf/mlp.hpp"
#include "gpf/sampling.hpp"
#include "gpf/spatial_index.hpp"
#include "gpf/synth.hpp"
#include "gpf/training.hpp"
