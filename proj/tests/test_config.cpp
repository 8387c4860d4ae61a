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
#include <gtest/gtest.h>
#include <gtest/gtest.h>

#include <filesystem>

#include "gpf/config.hpp"
#include "test_util.hpp"

using namespace gpf;
using json = nlohmann::json;

TEST(Config, DefaultsValidate) { EXPECT_NO_THROW(Settings{}.validate()); }

TEST(Config, OverridesApply) {
  Settings s;
  apply_overrides(s, json::parse(R"({
    "synth": {"kind": "two_slabs", "resolution": 32},
    "sampling": {"kind": "uni64", "n_k": 8},
    "kernel": {"aggregator": "idw", "k_neighbors": 4},
    "train": {"optimizer": "adam", "iters": 17},
    "finetune": {"refine_offset_weight": "inf"},
    "depth": {"samples_per_ray": 64}
  })"));
  EXPECT_EQ(s.synth.kind, synth::SceneKind::two_slabs);
  EXPECT_EQ(s.synth.resolution, 32);
  EXPECT_EQ(s.train.sampler.kind, SamplerKind::uni64);
  EXPECT_EQ(s.train.sampler.log.n_k, 8);
  EXPECT_EQ(s.train.kernel.aggregator, AggregatorKind::idw);
  EXPECT_EQ(s.train.kernel.k_neighbors, 4);
  EXPECT_EQ(s.train.optimizer, OptimizerKind::adam);
  EXPECT_EQ(s.train.iters, 17);
  EXPECT_TRUE(std::isinf(s.finetune.refine_offset_weight));
  EXPECT_EQ(s.depth.samples_per_ray, 64);
  EXPECT_EQ(s.finetune.depth.samples_per_ray, 64);
  // untouched keys keep defaults
  EXPECT_EQ(s.fetch_top_k, Settings{}.fetch_top_k);
}

TEST(Config, RejectsUnknownSectionsKeysAndBadValues) {
  const char* bad[] = {
      R"({"render": {}})",
      R"({"train": {"learning_rate": 0.1}})",
      R"({"train": {"iters": "many"}})",
      R"({"kernel": {"aggregator": "max"}})",
      R"({"train": 3})",
      R"([1, 2])",
      R"({"synth": {"n_points": 5}})",
  };
  for (const char* b : bad) {
    Settings s;
    EXPECT_THROW(apply_overrides(s, json::parse(b)), InputError) << b;
  }
}

TEST(Config, JsonRoundTripIsIdentity) {
  Settings s;
  apply_overrides(s, json::parse(R"({"kernel": {"aggregator": "idw"}, "finetune": {"refine_offset_weight": "inf"},
                                     "train": {"optimizer": "adam"}, "synth": {"kind": "textured_cube"}})"));
  const json j = settings_to_json(s);
  Settings t;
  apply_overrides(t, j);
  EXPECT_EQ(settings_to_json(t), j);
  Settings d;
  Settings e;
  apply_overrides(e, settings_to_json(d));
  EXPECT_EQ(settings_to_json(e), settings_to_json(d));
}

TEST(Config, LoadSettingsFromFile) {
  const auto dir = std::filesystem::temp_directory_path() / "gpf_test_config";
  std::filesystem::create_directories(dir);
  io::write_file(dir / "ok.json", R"({"train": {"seed": 99}})");
  EXPECT_EQ(load_settings(dir / "ok.json").train.seed, 99u);
  io::write_file(dir / "broken.json", R"({"train": )");
  EXPECT_THROW(load_settings(dir / "broken.json"), ParseError);
  EXPECT_THROW(load_settings(dir / "absent.json"), InputError);
}
