#pragma once

#include <stdexcept>
#include <string>

namespace popgraph {

// Error taxonomy shared by the library and the CLI. Each class maps to a
// distinct process exit code (see exit_code()).
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

class ShapeError : public Error {
public:
    using Error::Error;
};

class IndexError : public Error {
public:
    using Error::Error;
};

class ParseError : public Error {
public:
    using Error::Error;
};

class ValidationError : public Error {
public:
    using Error::Error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

class SchemaError : public Error {
public:
    using Error::Error;
};

class EmptyLossSupport : public Error {
public:
    using Error::Error;
};

class EmptyEval : public Error {
public:
    using Error::Error;
};

class UndefinedMetric : public Error {
public:
    using Error::Error;
};

class DivergenceError : public Error {
public:
    using Error::Error;
};

class IncompatibleCheckpoint : public Error {
public:
    using Error::Error;
};

class FormatError : public Error {
public:
    using Error::Error;
};

class IOError : public Error {
public:
    using Error::Error;
};

inline int exit_code(const std::exception& e) {
    if (dynamic_cast<const ConfigError*>(&e)) return 2;
    if (dynamic_cast<const IOError*>(&e)) return 3;
    if (dynamic_cast<const DivergenceError*>(&e)) return 4;
    if (dynamic_cast<const ParseError*>(&e)) return 5;
    if (dynamic_cast<const ValidationError*>(&e)) return 6;
    if (dynamic_cast<const IncompatibleCheckpoint*>(&e)) return 7;
    if (dynamic_cast<const FormatError*>(&e)) return 8;
    return 1;
}

} // namespace popgraph
