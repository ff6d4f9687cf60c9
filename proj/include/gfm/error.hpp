#pragma once

#include <stdexcept>
#include <string>

namespace gfm {

// Base for every error raised by the library. `kind()` is a stable short tag
// used by the CLI to pick exit codes and by tests to check error categories.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& what)
      : std::runtime_error(kind + ": " + what), kind_(std::move(kind)) {}
  const std::string& kind() const noexcept { return kind_; }

 private:
  std::string kind_;
};

#define GFM_DEFINE_ERROR(Name, tag) \
  class Name : public Error {       \
   public:                          \
    explicit Name(const std::string& what) : Error(tag, what) {} \
  }

GFM_DEFINE_ERROR(DimensionError, "dimension error");
GFM_DEFINE_ERROR(ConfigError, "config error");
GFM_DEFINE_ERROR(NumericError, "numeric error");
GFM_DEFINE_ERROR(UsageError, "usage error");
GFM_DEFINE_ERROR(InternalError, "internal error");
GFM_DEFINE_ERROR(FormatError, "format error");
GFM_DEFINE_ERROR(LoadError, "load error");
GFM_DEFINE_ERROR(InputError, "input error");
GFM_DEFINE_ERROR(EmptyRoiError, "empty roi");
GFM_DEFINE_ERROR(UndefinedIouError, "undefined iou");
GFM_DEFINE_ERROR(GenerationError, "generation error");

// Raised when a raster's band count does not match the patch embedding.
class AdaptationRequiredError : public Error {
 public:
  AdaptationRequiredError(long expected, long given)
      : Error("adaptation required",
              "patch embedding expects " + std::to_string(expected) + " bands but input has " +
                  std::to_string(given) +
                  "; choose a band adaptation strategy (zero_padded, channel_duplication, "
                  "retrained_patch_embed)"),
        expected_(expected),
        given_(given) {}
  long expected() const noexcept { return expected_; }
  long given() const noexcept { return given_; }

 private:
  long expected_;
  long given_;
};

#undef GFM_DEFINE_ERROR

}  // namespace gfm
