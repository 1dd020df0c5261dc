// SPDX-License-Identifier: Apache-2.0
#include "unisd/errors.hpp"

namespace unisd {

const char* to_string(ErrorKind kind) {
    switch (kind) {
        case ErrorKind::config: return "configuration";
        case ErrorKind::window: return "window";
        case ErrorKind::distribution: return "distribution";
        case ErrorKind::dimension: return "dimension";
        case ErrorKind::parameter: return "parameter";
        case ErrorKind::numeric: return "numeric";
        case ErrorKind::degenerate_weight: return "degenerate-weight";
        case ErrorKind::corruption: return "corruption";
        case ErrorKind::pairing: return "pairing";
        case ErrorKind::io: return "io";
    }
    return "unknown";
}

}  // namespace unisd
