#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "utixvec/synth_corpus.hpp"

namespace utixvec::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitIo = 3;
inline constexpr int kExitNumerical = 4;

/// Runs one subcommand. `args` excludes the program name. Progress goes to
/// `out`, diagnostics to `err`; the return value is the process exit code.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

enum class SsiMode { kSingle, kMulti, kMultiXVec };

SsiMode parse_ssi_mode(const std::string& name);
std::string to_string(SsiMode mode);

/// Manifest indices used by one SSI configuration. Single mode takes every
/// chunk of `speaker`; the multi modes take every held-out speaker. With
/// `match_frames`, the multi training chunks are a seeded random subset the
/// size of the single speaker's training set.
struct SsiSelection {
  std::vector<std::size_t> train;
  std::vector<std::size_t> dev;
  std::vector<std::size_t> test;
};

SsiSelection select_ssi(const CorpusManifest& manifest, SsiMode mode, std::uint32_t speaker,
                        bool match_frames, std::uint64_t seed);

/// Lowest held-out speaker id; DataError when the corpus has none.
std::uint32_t first_heldout_speaker(const CorpusManifest& manifest);

}  // namespace utixvec::cli
