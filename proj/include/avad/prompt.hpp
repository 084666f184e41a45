#pragma once

#include <string>

namespace avad {

/// The canonical anomaly-classification system prompt, embedded verbatim.
/// tests/assets keep a copy on disk; the two must stay byte-identical.
const std::string& canonical_system_prompt();

/// Short prompt used by micro gradient tests; same protocol, ~10 tokens.
const std::string& compact_system_prompt();

}  // namespace avad
