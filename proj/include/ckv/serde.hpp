// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <json.hpp>

#include "ckv/policy.hpp"

namespace ckv {

// JSON echo of a policy config, embedded in run logs and reports.
nlohmann::json policy_config_to_json(const PolicyConfig& config);
PolicyConfig policy_config_from_json(const nlohmann::json& j);

}  // namespace ckv
