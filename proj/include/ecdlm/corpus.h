#pragma once

#include <cstdint>
#include <vector>

#include "ecdlm/rng.h"

namespace ecdlm {

using Sequence = std::vector<int>;
using Dataset = std::vector<Sequence>;

// Order-1 Markov chain over [0, vocab).
struct MarkovChain {
  std::vector<double> initial;                  // length V
  std::vector<std::vector<double>> transition;  // V x V, rows sum to 1

  int vocab() const { return static_cast<int>(initial.size()); }

  // Each row puts most of its mass on a few random successors and spreads
  // the remainder uniformly, so bigram context is strongly predictive.
  static MarkovChain random(std::uint64_t seed, int vocab);
};

Dataset generate_corpus(const MarkovChain& chain, std::uint64_t seed, int n_sequences, int seq_len);
Dataset generate_corpus(std::uint64_t seed, int n_sequences, int seq_len, int vocab_size);

struct MaskSpec {
  double mask_ratio = 0.0;
  std::vector<int> masked_positions;  // ascending
  int mask_token_id = 0;
};

struct MaskedSequence {
  Sequence tokens;
  MaskSpec spec;
  std::vector<int> targets;  // original tokens at spec.masked_positions
};

// Number of positions masked at ratio r over L positions: round-half-up(r*L).
int masked_count(double r, int length);

MaskedSequence apply_mask(const Sequence& sequence, double r, Rng& rng, int mask_token_id);
// Masks exactly `count` uniformly chosen positions.
MaskedSequence apply_mask_count(const Sequence& sequence, int count, Rng& rng, int mask_token_id);

}  // namespace ecdlm
