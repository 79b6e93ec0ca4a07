#pragma once

#include <stdexcept>
#include <string>

namespace tsyn {

enum class ErrorKind {
    Runtime,  // anything that went wrong while executing a valid request
    Config,   // invalid configuration / flags / malformed spec
    Io,       // file system and file format failures
};

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& msg) : std::runtime_error(msg), kind_(kind) {}
    ErrorKind kind() const { return kind_; }

private:
    ErrorKind kind_;
};

[[noreturn]] inline void fail_runtime(const std::string& msg) { throw Error(ErrorKind::Runtime, msg); }
[[noreturn]] inline void fail_config(const std::string& msg) { throw Error(ErrorKind::Config, msg); }
[[noreturn]] inline void fail_io(const std::string& msg) { throw Error(ErrorKind::Io, msg); }

inline void require(bool cond, ErrorKind kind, const std::string& msg) {
    if (!cond) throw Error(kind, msg);
}

}  // namespace tsyn
