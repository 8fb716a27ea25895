#pragma once

#include <stdexcept>
#include <string>

namespace iapo {

// Base of every error raised by the library. Subclasses name the failure
// category so callers (and the CLI exit-code mapping) can dispatch on it.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

#define IAPO_DEFINE_ERROR(Name)            \
  class Name : public Error {              \
   public:                                 \
    using Error::Error;                    \
  }

IAPO_DEFINE_ERROR(LengthError);        // sequence or cache overflow
IAPO_DEFINE_ERROR(NumericError);       // non-finite values
IAPO_DEFINE_ERROR(DomainError);        // argument outside the operation's domain
IAPO_DEFINE_ERROR(ShapeError);         // misaligned arrays
IAPO_DEFINE_ERROR(ConfigError);        // invalid configuration values
IAPO_DEFINE_ERROR(IoError);            // filesystem failures
IAPO_DEFINE_ERROR(ParseError);         // malformed input text
IAPO_DEFINE_ERROR(VocabularyError);    // token outside the vocabulary
IAPO_DEFINE_ERROR(IntegrityError);     // corrupt or truncated checkpoint
IAPO_DEFINE_ERROR(IncompatibleError);  // checkpoint from another format/config
IAPO_DEFINE_ERROR(ResourceError);      // enumeration or allocation caps
IAPO_DEFINE_ERROR(UsageError);         // command-line misuse

#undef IAPO_DEFINE_ERROR

}  // namespace iapo
