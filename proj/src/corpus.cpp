#include "ecdlm/corpus.h"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "ecdlm/error.h"

namespace ecdlm {

namespace {

int sample(const std::vector<double>& probs, Rng& rng) {
  const double u = rng.uniform();
  double acc = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    acc += probs[i];
    if (u < acc) return static_cast<int>(i);
  }
  return static_cast<int>(probs.size()) - 1;
}

}  // namespace

MarkovChain MarkovChain::random(std::uint64_t seed, int vocab) {
  if (vocab < 1) throw Error(ErrorKind::kInvalidConfig, "vocabulary must be non-empty");
  constexpr int kSuccessors = 3;
  constexpr double kBackground = 0.1;
  Rng rng(seed);
  MarkovChain chain;
  chain.initial.assign(static_cast<std::size_t>(vocab), 1.0 / vocab);
  chain.transition.assign(static_cast<std::size_t>(vocab),
                          std::vector<double>(static_cast<std::size_t>(vocab), kBackground / vocab));
  for (auto& row : chain.transition) {
    double weights[kSuccessors];
    double total = 0.0;
    for (double& w : weights) total += (w = 0.2 + rng.uniform());
    for (double w : weights) {
      row[rng.below(static_cast<std::uint64_t>(vocab))] += (1.0 - kBackground) * w / total;
    }
  }
  return chain;
}

Dataset generate_corpus(const MarkovChain& chain, std::uint64_t seed, int n_sequences, int seq_len) {
  if (n_sequences < 0 || seq_len < 1) {
    throw Error(ErrorKind::kInvalidConfig, "corpus needs n_sequences >= 0 and seq_len >= 1");
  }
  Rng rng(seed);
  Dataset data;
  data.reserve(static_cast<std::size_t>(n_sequences));
  for (int s = 0; s < n_sequences; ++s) {
    Sequence seq(static_cast<std::size_t>(seq_len));
    seq[0] = sample(chain.initial, rng);
    for (int i = 1; i < seq_len; ++i) {
      seq[static_cast<std::size_t>(i)] =
          sample(chain.transition[static_cast<std::size_t>(seq[static_cast<std::size_t>(i - 1)])], rng);
    }
    data.push_back(std::move(seq));
  }
  return data;
}

Dataset generate_corpus(std::uint64_t seed, int n_sequences, int seq_len, int vocab_size) {
  // Chain structure and sampling draw from separate streams of the same seed.
  Rng root(seed);
  const auto chain = MarkovChain::random(root.split(1).next_u64(), vocab_size);
  return generate_corpus(chain, root.split(2).next_u64(), n_sequences, seq_len);
}

int masked_count(double r, int length) {
  if (!(r >= 0.0 && r <= 1.0)) throw Error(ErrorKind::kInvalidInput, "mask ratio outside [0, 1]");
  return std::clamp(static_cast<int>(std::floor(r * length + 0.5)), 0, length);
}

MaskedSequence apply_mask_count(const Sequence& sequence, int count, Rng& rng, int mask_token_id) {
  const int length = static_cast<int>(sequence.size());
  if (count < 0 || count > length) throw Error(ErrorKind::kInvalidInput, "mask count out of range");
  std::vector<int> order(static_cast<std::size_t>(length));
  std::iota(order.begin(), order.end(), 0);
  for (int i = 0; i < count; ++i) {
    const int j = i + static_cast<int>(rng.below(static_cast<std::uint64_t>(length - i)));
    std::swap(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(j)]);
  }
  MaskedSequence out;
  out.tokens = sequence;
  out.spec.mask_ratio = length == 0 ? 0.0 : static_cast<double>(count) / length;
  out.spec.mask_token_id = mask_token_id;
  out.spec.masked_positions.assign(order.begin(), order.begin() + count);
  std::sort(out.spec.masked_positions.begin(), out.spec.masked_positions.end());
  for (int p : out.spec.masked_positions) {
    out.targets.push_back(sequence[static_cast<std::size_t>(p)]);
    out.tokens[static_cast<std::size_t>(p)] = mask_token_id;
  }
  return out;
}

MaskedSequence apply_mask(const Sequence& sequence, double r, Rng& rng, int mask_token_id) {
  auto out = apply_mask_count(sequence, masked_count(r, static_cast<int>(sequence.size())), rng,
                              mask_token_id);
  out.spec.mask_ratio = r;
  return out;
}

}  // namespace ecdlm
