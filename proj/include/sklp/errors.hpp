#pragma once

#include <stdexcept>
#include <string>

namespace sklp {

/// Base of every error raised by the library. `kind()` is a short stable
/// tag ("config", "shape", ...) that the CLI prints in its diagnostic line.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& what)
      : std::runtime_error(kind + " error: " + what), kind_(std::move(kind)) {}
  const std::string& kind() const noexcept { return kind_; }

 private:
  std::string kind_;
};

#define SKLP_DEFINE_ERROR(Name, tag) \
  class Name : public Error {        \
   public:                           \
    explicit Name(const std::string& what) : Error(tag, what) {} \
  };

SKLP_DEFINE_ERROR(ConfigError, "configuration")
SKLP_DEFINE_ERROR(ShapeError, "shape")
SKLP_DEFINE_ERROR(VocabularyError, "vocabulary")
SKLP_DEFINE_ERROR(NumericError, "numeric")
SKLP_DEFINE_ERROR(UsageError, "usage")
SKLP_DEFINE_ERROR(ContractError, "contract")
SKLP_DEFINE_ERROR(DataError, "data")
SKLP_DEFINE_ERROR(GeometryError, "geometry")
SKLP_DEFINE_ERROR(TemplateError, "template")
SKLP_DEFINE_ERROR(ChainError, "chain")
SKLP_DEFINE_ERROR(ScreeningError, "screening")
SKLP_DEFINE_ERROR(FormatError, "format")
SKLP_DEFINE_ERROR(IoError, "io")

#undef SKLP_DEFINE_ERROR

}  // namespace sklp
