#pragma once

#include <stdexcept>
#include <string>

namespace kevo {

/// Base of every error raised by the toolkit. Callers that only need a
/// message and a failure status catch this.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class InvalidInputError : public Error { public: using Error::Error; };
class DimensionError : public Error { public: using Error::Error; };
class DivergenceUndefinedError : public Error { public: using Error::Error; };
class ParameterError : public Error { public: using Error::Error; };

// trace file and lens errors
class IoError : public Error { public: using Error::Error; };
class FormatError : public Error { public: using Error::Error; };
class CorruptionError : public Error { public: using Error::Error; };
class DataError : public Error { public: using Error::Error; };
class BoundsError : public Error { public: using Error::Error; };
class MissingHeadError : public Error { public: using Error::Error; };

// engine
class ConfigError : public Error { public: using Error::Error; };
class CapacityError : public Error { public: using Error::Error; };
class UnsatisfiablePlanError : public Error { public: using Error::Error; };

}  // namespace kevo
