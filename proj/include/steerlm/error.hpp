#pragma once

#include <stdexcept>
#include <string>
#include <utility>

namespace steerlm {

// Base of every error the library throws. Callers that only care about
// "something went wrong in steerlm" catch this; the CLI maps the concrete
// subclasses onto distinct exit codes.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Bundle loading failures.
class LoadError : public Error {
public:
    using Error::Error;
};

class MissingTensorError : public LoadError {
public:
    explicit MissingTensorError(std::string tensor)
        : LoadError("missing tensor '" + tensor + "'"), tensor_(std::move(tensor)) {}
    const std::string& tensor() const noexcept { return tensor_; }

private:
    std::string tensor_;
};

class ShapeMismatchError : public LoadError {
public:
    ShapeMismatchError(std::string tensor, const std::string& detail)
        : LoadError("shape mismatch for tensor '" + tensor + "': " + detail), tensor_(std::move(tensor)) {}
    const std::string& tensor() const noexcept { return tensor_; }

private:
    std::string tensor_;
};

class HashMismatchError : public LoadError {
public:
    HashMismatchError(const std::string& stored, const std::string& computed)
        : LoadError("content hash mismatch: stored " + stored + ", computed " + computed) {}
};

class ParseError : public Error {
public:
    using Error::Error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

class BoundsError : public Error {
public:
    using Error::Error;
};

// Steering vectors / plans that do not belong to the running model.
class IncompatibleError : public Error {
public:
    using Error::Error;
};

class TemplateError : public Error {
public:
    using Error::Error;
};

// Malformed corpora, response files, traces.
class DataError : public Error {
public:
    using Error::Error;
};

}  // namespace steerlm
