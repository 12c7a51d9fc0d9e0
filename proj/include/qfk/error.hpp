/* Copyright 2026 The qfk Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/

#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace qfk {

enum class Errc {
  kInvalidArgument,
  kShapeMismatch,
  kNonFinite,
  kBadMagic,
  kVersionMismatch,
  kTruncated,
  kChecksum,
  kMalformed,
  kMissingFile,
  kCalibrationSize,
  kMissingLabel,
  kInternal,
};

inline std::string_view errc_name(Errc code) {
  switch (code) {
    case Errc::kInvalidArgument: return "invalid_argument";
    case Errc::kShapeMismatch: return "shape_mismatch";
    case Errc::kNonFinite: return "non_finite";
    case Errc::kBadMagic: return "bad_magic";
    case Errc::kVersionMismatch: return "version_mismatch";
    case Errc::kTruncated: return "truncated";
    case Errc::kChecksum: return "checksum";
    case Errc::kMalformed: return "malformed";
    case Errc::kMissingFile: return "missing_file";
    case Errc::kCalibrationSize: return "calibration_size";
    case Errc::kMissingLabel: return "missing_label";
    case Errc::kInternal: return "internal";
  }
  return "unknown";
}

/// Every failure raised by the library carries one of the codes above so the
/// command-line driver can map it to an exit status.
class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& what)
      : std::runtime_error(what), code_(code) {}

  Errc code() const noexcept { return code_; }

 private:
  Errc code_;
};

[[noreturn]] inline void fail(Errc code, const std::string& what) {
  throw Error(code, what);
}

inline void check(bool cond, Errc code, const std::string& what) {
  if (!cond) fail(code, what);
}

}  // namespace qfk
