#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace mvps {

// Base of every error thrown by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Caller supplied arguments that violate a precondition.
class InputError : public Error {
public:
    using Error::Error;
};

// Input data is structurally fine but numerically unusable (NaN depth etc.).
class DataError : public Error {
public:
    using Error::Error;
};

class RenderError : public Error {
public:
    using Error::Error;
};

class DegenerateRigError : public Error {
public:
    using Error::Error;
};

class RankDeficiencyError : public Error {
public:
    using Error::Error;
};

class InsufficientOverlapError : public Error {
public:
    using Error::Error;
};

class GaugeError : public Error {
public:
    using Error::Error;
};

class IoError : public Error {
public:
    IoError(const std::string& path, const std::string& what)
        : Error(path + ": " + what), path_(path) {}
    const std::string& path() const { return path_; }

private:
    std::string path_;
};

class MissingAssetError : public IoError {
public:
    MissingAssetError(const std::string& path, int view)
        : IoError(path, "missing asset for view " + std::to_string(view)), view_(view) {}
    int view() const { return view_; }

private:
    int view_;
};

class ParseError : public IoError {
public:
    ParseError(const std::string& path, std::size_t line, const std::string& what)
        : IoError(path, "line " + std::to_string(line) + ": " + what), line_(line) {}
    std::size_t line() const { return line_; }

private:
    std::size_t line_;
};

// Raised by the pipeline; names the frame and stage where a module error occurred.
class PipelineError : public Error {
public:
    PipelineError(int frame, const std::string& stage, const std::string& what)
        : Error("frame " + std::to_string(frame) + ", stage '" + stage + "': " + what),
          frame_(frame), stage_(stage) {}
    int frame() const { return frame_; }
    const std::string& stage() const { return stage_; }

private:
    int frame_;
    std::string stage_;
};

}  // namespace mvps
