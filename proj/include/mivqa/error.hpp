#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace mivqa {

enum class Errc {
  // validation failures (CLI exit code 2)
  EmptyBase,
  EmptyQuestion,
  ShapeMismatch,
  VocabMismatch,
  TargetOutOfRange,
  IndexOutOfRange,
  ManifestInvalid,
  ConfigInvalid,
  // runtime failures (CLI exit code 3)
  PoolExhausted,
  DetectorFailure,
  MissingImage,
  Diverged,
  Io,
};

constexpr std::string_view errc_name(Errc c) {
  switch (c) {
    case Errc::EmptyBase: return "EmptyBase";
    case Errc::EmptyQuestion: return "EmptyQuestion";
    case Errc::ShapeMismatch: return "ShapeMismatch";
    case Errc::VocabMismatch: return "VocabMismatch";
    case Errc::TargetOutOfRange: return "TargetOutOfRange";
    case Errc::IndexOutOfRange: return "IndexOutOfRange";
    case Errc::ManifestInvalid: return "ManifestInvalid";
    case Errc::ConfigInvalid: return "ConfigInvalid";
    case Errc::PoolExhausted: return "PoolExhausted";
    case Errc::DetectorFailure: return "DetectorFailure";
    case Errc::MissingImage: return "MissingImage";
    case Errc::Diverged: return "Diverged";
    case Errc::Io: return "Io";
  }
  return "Unknown";
}

constexpr bool is_validation_error(Errc c) { return c < Errc::PoolExhausted; }

class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& what)
      : std::runtime_error(std::string(errc_name(code)) + ": " + what), code_(code) {}

  Errc code() const noexcept { return code_; }

 private:
  Errc code_;
};

[[noreturn]] inline void fail(Errc code, const std::string& what) { throw Error(code, what); }

inline void require(bool cond, Errc code, const std::string& what) {
  if (!cond) fail(code, what);
}

}  // namespace mivqa
