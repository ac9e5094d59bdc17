#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace pbeps {

enum class ErrorCode {
    invalid_config,
    backing_io,
    unallocated_block,
    double_free,
    cache_exhausted,
    pin_limit,
    block_pinned,
    invalid_argument,
    unsorted_input,
    version_out_of_range,
    version_purged,
    invariant_violation,
};

std::string_view to_string(ErrorCode code) noexcept;

/// Every failure the library reports surfaces as this type; `code()` tells
/// callers which contract was broken.
class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& what)
        : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

    ErrorCode code() const noexcept { return code_; }

private:
    ErrorCode code_;
};

}  // namespace pbeps
