#pragma once

#include <stdexcept>
#include <string>

namespace rimbus {

/// Base class for all rimbus exceptions.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Invalid configuration (file, values, or cross-field constraints).
struct ConfigError : Error {
  using Error::Error;
};

/// Envelope could not be encoded (oversize payload, oversize topic).
struct EncodingError : Error {
  using Error::Error;
};

/// OS-level shared memory failure (shm_open, mmap, ftruncate).
struct ShmError : Error {
  using Error::Error;
};

/// Existing shared-memory segment has a different geometry than requested.
struct GeometryError : ShmError {
  using ShmError::ShmError;
};

/// Encoded envelope does not fit a ring slot.
struct SlotOverflowError : ShmError {
  using ShmError::ShmError;
};

/// Stream peer answered the handshake with the wrong magic/version.
struct HandshakeError : Error {
  using Error::Error;
};

/// A node with the same name already exists on this chip.
struct DuplicateNodeError : Error {
  using Error::Error;
};

/// Socket-level send failure, with errno context in the message.
struct SendError : Error {
  using Error::Error;
};

/// Report or file output could not be written.
struct IoError : Error {
  using Error::Error;
};

}  // namespace rimbus
