#pragma once

#include <cstdint>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace pseg {

// Error codes shared by every module. The CLI maps them onto exit codes.
enum class ErrCode {
  Shape,           // operand extents incompatible
  Numeric,         // non-finite value produced
  Class,           // class index out of range
  Config,          // invalid configuration value
  Format,          // malformed binary/text file
  Io,              // filesystem failure
  EmptyMask,       // ground-truth mask has no foreground
  MissingClass,    // class never occurs in a dataset
  Placement,       // synthetic shapes cannot be placed
  Nondeterminism,  // function under check is not deterministic
};

inline const char* to_string(ErrCode c) {
  switch (c) {
    case ErrCode::Shape: return "shape-error";
    case ErrCode::Numeric: return "numeric-error";
    case ErrCode::Class: return "class-error";
    case ErrCode::Config: return "config-error";
    case ErrCode::Format: return "format-error";
    case ErrCode::Io: return "io-error";
    case ErrCode::EmptyMask: return "empty-mask";
    case ErrCode::MissingClass: return "missing-class-error";
    case ErrCode::Placement: return "placement-error";
    case ErrCode::Nondeterminism: return "nondeterminism-error";
  }
  return "unknown-error";
}

class Error : public std::runtime_error {
 public:
  Error(ErrCode code, const std::string& msg)
      : std::runtime_error(std::string(to_string(code)) + ": " + msg), code_(code) {}
  ErrCode code() const { return code_; }

 private:
  ErrCode code_;
};

[[noreturn]] inline void fail(ErrCode code, const std::string& msg) { throw Error(code, msg); }

using Shape = std::vector<int64_t>;

inline int64_t numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t e : s) n *= e;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '(';
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) os << 'x';
    os << s[i];
  }
  os << ')';
  return os.str();
}

// Plain row-major f32 array used for storage, I/O and model parameters.
// Tape tensors are built from these at the start of each forward pass.
struct NdArray {
  Shape shape;
  std::vector<float> v;

  NdArray() = default;
  NdArray(Shape s, float fill = 0.0f) : shape(std::move(s)), v(static_cast<size_t>(pseg::numel(shape)), fill) {}
  NdArray(Shape s, std::vector<float> data) : shape(std::move(s)), v(std::move(data)) {
    if (static_cast<int64_t>(v.size()) != pseg::numel(shape))
      fail(ErrCode::Shape, "NdArray data length does not match shape " + shape_str(shape));
  }

  int64_t numel() const { return static_cast<int64_t>(v.size()); }
  float& at(int64_t i) { return v[static_cast<size_t>(i)]; }
  float at(int64_t i) const { return v[static_cast<size_t>(i)]; }
};

}  // namespace pseg
