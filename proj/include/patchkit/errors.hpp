#pragma once

#include <stdexcept>
#include <string>

namespace patchkit {

// Base class for all library errors.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Tensor dimension mismatch; message names both shapes.
struct ShapeError : Error {
    using Error::Error;
};

// Checkpoint / file parsing problems.
struct LoadError : Error {
    using Error::Error;
};

// Token id out of range or malformed vocabulary data.
struct VocabError : Error {
    using Error::Error;
};

// Requested span/occurrence does not exist in a sequence.
struct SpanError : Error {
    using Error::Error;
};

// Clean/corrupt pair has mismatched token lengths, or a replacement is
// not token-aligned.
struct AlignmentError : Error {
    using Error::Error;
};

// Invalid patch request (missing site, bad shape, bad position).
struct PatchError : Error {
    using Error::Error;
};

// Activation requested from a run that did not capture it.
struct CacheMissError : Error {
    using Error::Error;
};

// Invalid experiment configuration or unusable inputs.
struct ConfigError : Error {
    using Error::Error;
};

} // namespace patchkit
