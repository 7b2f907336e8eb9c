#include "ragfire/common.hpp"

#include <numeric>

namespace ragfire {

const char* error_code_name(ErrorCode code) {
  switch (code) {
    case ErrorCode::OverLength: return "OverLength";
    case ErrorCode::BadLayer: return "BadLayer";
    case ErrorCode::Empty: return "Empty";
    case ErrorCode::TooShort: return "TooShort";
    case ErrorCode::WidthMismatch: return "WidthMismatch";
    case ErrorCode::DuplicateIdWithinBatch: return "DuplicateIdWithinBatch";
    case ErrorCode::EmptyStore: return "EmptyStore";
    case ErrorCode::ProductionModeRefusal: return "ProductionModeRefusal";
    case ErrorCode::NotEnoughSamples: return "NotEnoughSamples";
    case ErrorCode::NoAnchors: return "NoAnchors";
    case ErrorCode::SingleClass: return "SingleClass";
    case ErrorCode::LayoutMismatch: return "LayoutMismatch";
    case ErrorCode::EmptyBatch: return "EmptyBatch";
    case ErrorCode::DivergedLoss: return "DivergedLoss";
    case ErrorCode::GradCheckFailed: return "GradCheckFailed";
    case ErrorCode::SameRole: return "SameRole";
    case ErrorCode::EmptyCounts: return "EmptyCounts";
    case ErrorCode::EmptyList: return "EmptyList";
    case ErrorCode::UnknownRole: return "UnknownRole";
    case ErrorCode::BackendUnavailable: return "BackendUnavailable";
    case ErrorCode::MalformedDoc: return "MalformedDoc";
    case ErrorCode::BindFailure: return "BindFailure";
    case ErrorCode::ConfigInvalid: return "ConfigInvalid";
    case ErrorCode::FingerprintMismatch: return "FingerprintMismatch";
    case ErrorCode::SpecInvalid: return "SpecInvalid";
    case ErrorCode::MissingProNet: return "MissingProNet";
    case ErrorCode::IoError: return "IoError";
  }
  return "UnknownError";
}

std::vector<size_t> sample_without_replacement(size_t population, size_t n, uint64_t seed) {
  if (n > population) {
    throw Error(ErrorCode::NotEnoughSamples,
                "requested " + std::to_string(n) + " of " + std::to_string(population));
  }
  std::vector<size_t> indices(population);
  std::iota(indices.begin(), indices.end(), size_t{0});
  Rng rng(seed);
  for (size_t i = 0; i < n; ++i) {
    const size_t j = i + static_cast<size_t>(rng.below(population - i));
    std::swap(indices[i], indices[j]);
  }
  indices.resize(n);
  return indices;
}

std::string to_hex(uint64_t value) {
  static const char* digits = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i) {
    out[static_cast<size_t>(i)] = digits[value & 0xF];
    value >>= 4;
  }
  return out;
}

}  // namespace ragfire
