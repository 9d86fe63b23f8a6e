#pragma once
// Exception hierarchy shared by all microsolve modules.

#include <stdexcept>
#include <string>

namespace microsolve {

class Error : public std::runtime_error {
public:
    explicit Error(const std::string& what) : std::runtime_error(what) {}
};

class DimensionMismatch : public Error {
public:
    using Error::Error;
};

class DomainError : public Error {
public:
    using Error::Error;
};

class ParseError : public Error {
public:
    ParseError(const std::string& msg, int column)
        : Error("column " + std::to_string(column) + ": " + msg), column_(column) {}
    int column() const { return column_; }

private:
    int column_;
};

class ConstructionError : public Error {
public:
    using Error::Error;
};

class CflViolation : public Error {
public:
    using Error::Error;
};

class NotContractive : public Error {
public:
    NotContractive(const std::string& what, double norm) : Error(what), norm_(norm) {}
    double norm() const { return norm_; }

private:
    double norm_;
};

class ConvergenceError : public Error {
public:
    using Error::Error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

// Wraps a module error with the pipeline stage where it was raised.
class StageError : public Error {
public:
    StageError(std::string stage, const std::string& what)
        : Error("[" + stage + "] " + what), stage_(std::move(stage)) {}
    const std::string& stage() const { return stage_; }

private:
    std::string stage_;
};

template <class F>
decltype(auto) with_stage(const std::string& stage, F&& f) {
    try {
        return f();
    } catch (const StageError&) {
        throw;
    } catch (const NotContractive&) {
        throw;
    } catch (const std::exception& e) {
        throw StageError(stage, e.what());
    }
}

}  // namespace microsolve
