#pragma once

#include <stdexcept>
#include <string>

namespace threejoin {

// Process exit codes are stable per error class: 1 usage, 2 data/validation,
// 3 numeric.
enum class ErrorClass { usage = 1, data = 2, numeric = 3 };

class Error : public std::runtime_error {
 public:
  Error(ErrorClass error_class, const std::string& what)
      : std::runtime_error(what), error_class_(error_class) {}

  ErrorClass error_class() const noexcept { return error_class_; }
  int exit_code() const noexcept { return static_cast<int>(error_class_); }

 private:
  ErrorClass error_class_;
};

#define THREEJOIN_DEFINE_ERROR(Name, Class)                             \
  class Name : public Error {                                           \
   public:                                                              \
    explicit Name(const std::string& what) : Error(Class, what) {}      \
  }

THREEJOIN_DEFINE_ERROR(UsageError, ErrorClass::usage);
THREEJOIN_DEFINE_ERROR(IoError, ErrorClass::data);
THREEJOIN_DEFINE_ERROR(ValidationError, ErrorClass::data);
THREEJOIN_DEFINE_ERROR(ShapeError, ErrorClass::data);
THREEJOIN_DEFINE_ERROR(StateError, ErrorClass::data);
THREEJOIN_DEFINE_ERROR(SamplingError, ErrorClass::data);
THREEJOIN_DEFINE_ERROR(NumericError, ErrorClass::numeric);

#undef THREEJOIN_DEFINE_ERROR

}  // namespace threejoin
