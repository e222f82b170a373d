#pragma once

#include <stdexcept>
#include <string>

namespace use {

// All library failures derive from use::Error so callers can catch one type.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

#define USE_DEFINE_ERROR(Name) \
  class Name : public Error {  \
   public:                     \
    using Error::Error;        \
  };

USE_DEFINE_ERROR(DimensionError)
USE_DEFINE_ERROR(DomainError)
USE_DEFINE_ERROR(IndexError)
USE_DEFINE_ERROR(GraphError)
USE_DEFINE_ERROR(EvaluationError)
USE_DEFINE_ERROR(ConfigError)
USE_DEFINE_ERROR(LengthError)
USE_DEFINE_ERROR(EmptyInputError)
USE_DEFINE_ERROR(FormatError)
USE_DEFINE_ERROR(VersionError)
USE_DEFINE_ERROR(StaleStateError)
USE_DEFINE_ERROR(DegenerateEmbeddingError)
USE_DEFINE_ERROR(DatasetError)
USE_DEFINE_ERROR(ScheduleError)
USE_DEFINE_ERROR(TrainingError)
USE_DEFINE_ERROR(BudgetError)
USE_DEFINE_ERROR(VocabError)
USE_DEFINE_ERROR(SpecError)
USE_DEFINE_ERROR(UndefinedMetricError)
USE_DEFINE_ERROR(TaskError)

#undef USE_DEFINE_ERROR

}  // namespace use
