#include "echoreg/error.hpp"

namespace echoreg {

const char* to_string(ErrorKind kind) {
    switch (kind) {
        case ErrorKind::contract: return "contract";
        case ErrorKind::format: return "format";
        case ErrorKind::undefined: return "undefined";
        case ErrorKind::config: return "config";
        case ErrorKind::checkpoint: return "checkpoint";
        case ErrorKind::io: return "io";
    }
    return "unknown";
}

Error::Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}

}  // namespace echoreg
