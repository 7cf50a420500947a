#include "coedg/error.hpp"

namespace coedg {

const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kInvalidArgument: return "invalid argument";
    case ErrorKind::kConfig: return "config error";
    case ErrorKind::kParse: return "parse error";
    case ErrorKind::kTransport: return "transport error";
    case ErrorKind::kTimeout: return "deadline exceeded";
    case ErrorKind::kProtocol: return "protocol error";
    case ErrorKind::kUnsupported: return "unsupported";
    case ErrorKind::kInternal: return "internal error";
  }
  return "unknown";
}

}  // namespace coedg
