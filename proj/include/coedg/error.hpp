#pragma once

#include <stdexcept>
#include <string>

namespace coedg {

enum class ErrorKind {
  kInvalidArgument,  // precondition violated by caller-supplied data
  kConfig,           // bad configuration or unreadable input file
  kParse,            // malformed file or message
  kTransport,        // adapter pipe broke or child died
  kTimeout,          // adapter missed its deadline
  kProtocol,         // well-formed message with the wrong content
  kUnsupported,      // adapter does not implement the requested op
  kInternal,
};

const char* to_string(ErrorKind kind);

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const { return kind_; }

 private:
  ErrorKind kind_;
};

}  // namespace coedg
