//------------------------------------------------------------------------------
//
//   Copyright 2026 The CMKD Authors
//
//   Licensed under the Apache License, Version 2.0 (the "License");
//   you may not use this file except in compliance with the License.
//   You may obtain a copy of the License at
//
//       http://www.apache.org/licenses/LICENSE-2.0
//
//   Unless required by applicable law or agreed to in writing, software
//   distributed under the License is distributed on an "AS IS" BASIS,
//   WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
//   See the License for the specific language governing permissions and
//   limitations under the License.
//
//------------------------------------------------------------------------------

#pragma once

#include <stdexcept>

namespace cmkd {

// Common base so callers can catch library failures in one clause.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Shape or axis disagreement between tensors / buffers.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// A value left the mathematical domain of an operation (log of a
// non-positive number, division by zero, invalid probability vector).
class DomainError : public Error {
 public:
  using Error::Error;
};

// A scalar knob is out of range (temperature <= 0, negative epsilon, ...).
class ParameterError : public Error {
 public:
  using Error::Error;
};

// An API usage rule was broken (non-scalar loss to backward, empty input
// where at least one element is required).
class ContractError : public Error {
 public:
  using Error::Error;
};

// Statistically meaningless input, e.g. a constant vector fed to a
// correlation. The message names the offending sample where applicable.
class DegenerateInputError : public Error {
 public:
  using Error::Error;
};

// Out-of-range class label or index.
class IndexError : public Error {
 public:
  using Error::Error;
};

// Malformed on-disk data (bad magic, truncation, inconsistent counts).
class FormatError : public Error {
 public:
  using Error::Error;
};

// Invalid run configuration (unknown key, missing field, bad enum value).
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Filesystem-level failure (missing file, unwritable output).
class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace cmkd
