// Error types shared across the pipeline. The CLI maps each to an exit code.
#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace dlc {

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& path, std::size_t line, const std::string& what)
      : std::runtime_error(path + ":" + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

class UnsupportedField : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class NonMonotonicStamps : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class InvalidParams : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Fewer independent point-to-plane constraints than pose degrees of freedom.
class DegenerateGeometry : public std::runtime_error {
 public:
  explicit DegenerateGeometry(const std::string& what, std::ptrdiff_t window = -1)
      : std::runtime_error(what), window_(window) {}
  std::ptrdiff_t window() const { return window_; }

 private:
  std::ptrdiff_t window_;
};

/// Plane fit on too few or collinear points.
class Degenerate : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class NoCorrespondences : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class Unobservable : public std::runtime_error {
 public:
  explicit Unobservable(const std::string& what, std::vector<std::size_t> frames = {})
      : std::runtime_error(what), frames_(std::move(frames)) {}
  const std::vector<std::size_t>& frames() const { return frames_; }

 private:
  std::vector<std::size_t> frames_;
};

class EmptyFrame : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace dlc
