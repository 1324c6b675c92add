#pragma once

#include <stdexcept>
#include <string>

namespace xpe {

// Every failure raised by the library derives from Error; the subclass names
// the category so callers (and the CLI) can react without parsing messages.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class DimensionError : public Error { public: using Error::Error; };
class IndexError : public Error { public: using Error::Error; };
class ConfigError : public Error { public: using Error::Error; };
class ContractError : public Error { public: using Error::Error; };
class NumericError : public Error { public: using Error::Error; };
class RangeError : public Error { public: using Error::Error; };
class FormatError : public Error { public: using Error::Error; };
class IoError : public Error { public: using Error::Error; };
class IntegrityError : public Error { public: using Error::Error; };
class CompatibilityError : public Error { public: using Error::Error; };
class AggregationError : public Error { public: using Error::Error; };
class CapacityError : public Error { public: using Error::Error; };

}  // namespace xpe
