#pragma once

#include <stdexcept>
#include <string>

namespace tadp {

// Base for everything thrown by the library. Maps to CLI exit code 2.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Bad inputs, bad configs, contract violations caught up front. CLI exit code 1.
struct ValidationError : Error {
    using Error::Error;
};

}  // namespace tadp
