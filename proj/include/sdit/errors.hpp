#pragma once

#include <stdexcept>
#include <string>

namespace sdit {

// Base for every error the library raises on a violated contract.
struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Tensor / op contracts.
struct ShapeMismatch : Error {
  using Error::Error;
};
struct SplitSizeMismatch : Error {
  using Error::Error;
};
struct NonFinite : Error {
  using Error::Error;
};
struct NotScalar : Error {
  using Error::Error;
};
struct DisconnectedGraph : Error {
  using Error::Error;
};

// Spiking state contracts.
struct StateShapeMismatch : Error {
  using Error::Error;
};
struct StaleState : Error {
  using Error::Error;
};

// Parameter / range validation.
struct OutOfRange : Error {
  using Error::Error;
};
struct BadRange : Error {
  using Error::Error;
};
struct BadParam : Error {
  using Error::Error;
};

// File formats.
struct IoError : Error {
  using Error::Error;
};
struct BadMagic : Error {
  using Error::Error;
};
struct TruncatedFile : Error {
  using Error::Error;
};
struct DimMismatch : Error {
  using Error::Error;
};
struct VersionMismatch : Error {
  using Error::Error;
};
struct ConfigMismatch : Error {
  using Error::Error;
};
struct ChecksumMismatch : Error {
  using Error::Error;
};

}  // namespace sdit
