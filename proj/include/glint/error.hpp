#pragma once

#include <stdexcept>
#include <string>

namespace glint {

// Structured error carried by every failure path the engine reports.
class EngineError : public std::runtime_error {
  public:
    EngineError(std::string code, const std::string& message)
        : std::runtime_error(code + ": " + message), code_(std::move(code)) {}

    const std::string& code() const { return code_; }

  private:
    std::string code_;
};

[[noreturn]] inline void fail(const std::string& code, const std::string& message) {
    throw EngineError(code, message);
}

inline void require(bool cond, const std::string& code, const std::string& message) {
    if (!cond) fail(code, message);
}

}  // namespace glint
