#pragma once

#include <stdexcept>
#include <string>

namespace ennshift {

// Base of every error the library throws. `kind()` is a stable, machine-parsable
// class name that the CLI prints on failure.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& what)
      : std::runtime_error(what), kind_(std::move(kind)) {}
  const std::string& kind() const noexcept { return kind_; }

 private:
  std::string kind_;
};

#define ENNSHIFT_DEFINE_ERROR(Name, Kind)                                 \
  class Name : public Error {                                             \
   public:                                                                \
    explicit Name(const std::string& what) : Error(Kind, what) {}        \
  };

ENNSHIFT_DEFINE_ERROR(DimensionError, "dimension_error")
ENNSHIFT_DEFINE_ERROR(ContractError, "contract_error")
ENNSHIFT_DEFINE_ERROR(NumericError, "numeric_error")
ENNSHIFT_DEFINE_ERROR(FormatError, "format_error")
ENNSHIFT_DEFINE_ERROR(DigestError, "digest_error")
ENNSHIFT_DEFINE_ERROR(IoError, "io_error")
ENNSHIFT_DEFINE_ERROR(TrainingError, "training_error")
ENNSHIFT_DEFINE_ERROR(SearchError, "search_error")
ENNSHIFT_DEFINE_ERROR(DegenerateBaselineError, "degenerate_baseline")
ENNSHIFT_DEFINE_ERROR(ConfigError, "config_error")
ENNSHIFT_DEFINE_ERROR(MissingArtifactError, "missing_artifact")

#undef ENNSHIFT_DEFINE_ERROR

}  // namespace ennshift
