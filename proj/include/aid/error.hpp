#pragma once

#include <stdexcept>
#include <string>

namespace aid {

// Every diagnostic the library raises, one code per contract violation.
enum class errc {
    malformed_document,
    layout_violation,
    row_sum_violation,
    shape_violation,
    invalid_weight,
    no_generated_tokens,
    instance_too_large,
    invalid_source,
    empty_hijacker_set,
    index_out_of_range,
    layout_mismatch,
    invalid_config,
    length_exceeded,
    planting_failed,
};

class error : public std::runtime_error {
public:
    error(errc code, const std::string& what) : std::runtime_error(what), code_(code) {}

    errc code() const noexcept { return code_; }

private:
    errc code_;
};

inline const char* errc_name(errc c) {
    switch (c) {
        case errc::malformed_document:  return "MalformedDocument";
        case errc::layout_violation:    return "LayoutViolation";
        case errc::row_sum_violation:   return "RowSumViolation";
        case errc::shape_violation:     return "ShapeViolation";
        case errc::invalid_weight:      return "InvalidWeight";
        case errc::no_generated_tokens: return "NoGeneratedTokens";
        case errc::instance_too_large:  return "InstanceTooLarge";
        case errc::invalid_source:      return "InvalidSource";
        case errc::empty_hijacker_set:  return "EmptyHijackerSet";
        case errc::index_out_of_range:  return "IndexOutOfRange";
        case errc::layout_mismatch:     return "LayoutMismatch";
        case errc::invalid_config:      return "InvalidConfig";
        case errc::length_exceeded:     return "LengthExceeded";
        case errc::planting_failed:     return "PlantingFailed";
    }
    return "UnknownError";
}

} // namespace aid
