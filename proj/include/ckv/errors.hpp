// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace ckv {

// Error categories map 1:1 onto CLI exit codes (see tools/ckv_main.cpp):
//   usage 2, config 3, io/format 4, internal 5.

// Bad flag combinations, infeasible budgets, unknown policy names.
class config_error : public std::runtime_error {
public:
    explicit config_error(const std::string& msg) : std::runtime_error(msg) {}
};

// Unreadable, malformed or truncated input files; failed writes.
class io_error : public std::runtime_error {
public:
    explicit io_error(const std::string& msg) : std::runtime_error(msg) {}
};

// A library invariant was broken. Indicates a bug, not bad input.
class internal_error : public std::logic_error {
public:
    explicit internal_error(const std::string& msg) : std::logic_error(msg) {}
};

inline void check_internal(bool cond, const std::string& msg) {
    if (!cond)
        throw internal_error(msg);
}

}  // namespace ckv
