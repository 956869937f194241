// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "moesim/core.hpp"
#include "moesim/io_util.hpp"
#include "moesim/rng.hpp"

namespace moesim {

// What happens to a token once it has been unmasked.
enum class DecodedMode {
  Freeze,  // keeps being routed with its last selection
  Drop,    // leaves routing; its slot is kept but flagged inactive
};

/// Number of already-decoded tokens at each step of a block; entry t is the
/// count in force at step t, entry block_size the count after the block.
struct UnmaskSchedule {
  std::vector<std::uint32_t> decoded;

  static UnmaskSchedule none(std::uint32_t block_size) {
    return {std::vector<std::uint32_t>(block_size + 1, 0)};
  }

  // Tokens finalize at an even rate; all are done after the last step.
  static UnmaskSchedule linear(std::uint32_t block_size, std::uint32_t tokens) {
    UnmaskSchedule s;
    s.decoded.resize(block_size + 1);
    for (std::uint32_t t = 0; t <= block_size; ++t) {
      s.decoded[t] = static_cast<std::uint32_t>(static_cast<std::uint64_t>(tokens) * t / block_size);
    }
    return s;
  }

  // Each step finalizes a fixed fraction `rate` of the tokens still masked,
  // mimicking confidence-threshold decoding; the last step finalizes the rest.
  static UnmaskSchedule geometric(std::uint32_t block_size, std::uint32_t tokens, double rate) {
    UnmaskSchedule s;
    s.decoded.resize(block_size + 1);
    double masked = tokens;
    s.decoded[0] = 0;
    for (std::uint32_t t = 1; t < block_size; ++t) {
      masked *= (1.0 - rate);
      auto done = static_cast<std::uint32_t>(std::floor(tokens - masked));
      s.decoded[t] = std::max(s.decoded[t - 1], std::min(done, tokens));
    }
    s.decoded[block_size] = tokens;
    return s;
  }

  // Tokens finalized during step t.
  std::uint32_t finalized_at(std::uint32_t t) const { return decoded[t + 1] - decoded[t]; }
};

struct GenSpec {
  ModelShape shape;
  std::uint32_t blocks = 1;
  double persistence = 0.9;       // per expert, per step
  double popularity_skew = 1.0;   // Zipf exponent over expert ranks
  // Fraction of fresh draws that come from the block's own popularity
  // ranking (rather than the layer's masked-token ranking) by the final step
  // of a block; rises linearly from 0 at step 0.
  double content_shift = 0.0;
  UnmaskSchedule unmask;  // empty means "none decoded before block end"
  DecodedMode decoded_mode = DecodedMode::Freeze;
  std::uint64_t seed = 0;

  void validate() const {
    try {
      shape.validate();
    } catch (const Error& e) {
      throw Error(ErrorCode::InvalidSpec, e.what());
    }
    auto fail = [](const std::string& msg) { throw Error(ErrorCode::InvalidSpec, msg); };
    if (blocks < 1) fail("blocks must be >= 1");
    if (!(persistence >= 0.0 && persistence <= 1.0)) fail("persistence must lie in [0,1]");
    if (!(popularity_skew >= 0.0) || !std::isfinite(popularity_skew)) fail("popularity_skew must be >= 0");
    if (!(content_shift >= 0.0 && content_shift <= 1.0)) fail("content_shift must lie in [0,1]");
    if (!unmask.decoded.empty()) {
      const auto& u = unmask.decoded;
      if (u.size() != shape.block_size + 1) fail("unmask schedule needs block_size+1 entries");
      if (u.front() != 0) fail("unmask schedule must start at 0");
      if (!std::is_sorted(u.begin(), u.end())) fail("unmask schedule must be non-decreasing");
      if (u.back() > shape.tokens) fail("unmask schedule exceeds token count");
    }
  }
};

/// Reference workload: 16 layers of 256 experts, top-8 routing, a 32-token
/// block decoded over 32 steps, 64 GPU slots per layer.
inline constexpr double kCalibratedSimilarity = 0.985;

inline GenSpec calibrated_spec(std::uint64_t seed) {
  GenSpec g;
  g.shape = ModelShape{16, 256, 8, 64, 32, 32};
  g.blocks = 1;
  g.persistence = 0.9;
  g.popularity_skew = 1.3;
  g.content_shift = 1.0;
  g.seed = seed;
  return g;
}

namespace detail {

// Zipf weights indexed by expert under a given rank permutation.
inline std::vector<double> zipf_by_expert(const std::vector<ExpertId>& rank_to_expert, double skew) {
  std::vector<double> w(rank_to_expert.size());
  for (std::size_t r = 0; r < rank_to_expert.size(); ++r) {
    w[rank_to_expert[r]] = 1.0 / std::pow(static_cast<double>(r + 1), skew);
  }
  return w;
}

inline std::vector<ExpertId> random_permutation(std::uint32_t n, Xoshiro256& rng) {
  std::vector<ExpertId> p(n);
  std::iota(p.begin(), p.end(), ExpertId{0});
  shuffle(p, rng);
  return p;
}

// Weighted draw among experts not in `taken`.
inline ExpertId draw_excluding(const std::vector<double>& w, std::span<const ExpertId> taken,
                               Xoshiro256& rng) {
  auto excluded = [&](ExpertId e) { return std::find(taken.begin(), taken.end(), e) != taken.end(); };
  double total = 0.0;
  ExpertId last = 0;
  for (ExpertId e = 0; e < w.size(); ++e) {
    if (!excluded(e)) {
      total += w[e];
      last = e;
    }
  }
  const double target = rng.uniform() * total;
  double acc = 0.0;
  for (ExpertId e = 0; e < w.size(); ++e) {
    if (excluded(e)) continue;
    acc += w[e];
    if (target < acc) return e;
  }
  return last;
}

}  // namespace detail

/// Synthetic routing with temporal locality. Per token and step, each
/// expert of the previous selection survives with probability
/// `persistence`; the others are replaced by distinct draws from a Zipf
/// popularity mixture that drifts from a per-layer "masked" ranking towards
/// a per-block "content" ranking. Decoded tokens stop changing.
inline RoutingTrace generate(const GenSpec& spec) {
  spec.validate();
  const ModelShape& s = spec.shape;
  const std::uint32_t T = s.block_size;
  const auto unmask = spec.unmask.decoded.empty() ? UnmaskSchedule::none(T) : spec.unmask;

  RoutingTrace trace(s, spec.blocks);
  Xoshiro256 master(spec.seed);

  std::vector<std::vector<double>> mask_weights(s.layers);
  for (std::uint32_t l = 0; l < s.layers; ++l) {
    mask_weights[l] = detail::zipf_by_expert(detail::random_permutation(s.experts, master),
                                             spec.popularity_skew);
  }

  std::vector<ExpertId> kept;
  kept.reserve(s.top_k);
  for (std::uint32_t b = 0; b < spec.blocks; ++b) {
    // rank_of[n] = position of token n in the decoding order of this block
    const auto order = detail::random_permutation(s.tokens, master);
    std::vector<std::uint32_t> rank_of(s.tokens);
    for (std::uint32_t i = 0; i < s.tokens; ++i) rank_of[order[i]] = i;

    std::vector<std::vector<double>> content_weights(s.layers);
    for (std::uint32_t l = 0; l < s.layers; ++l) {
      content_weights[l] = detail::zipf_by_expert(detail::random_permutation(s.experts, master),
                                                  spec.popularity_skew);
    }
    Xoshiro256 rng = master.fork();

    for (std::uint32_t t = 0; t < T; ++t) {
      const std::uint32_t step = b * T + t;
      const double mix = T > 1 ? spec.content_shift * t / (T - 1) : 0.0;
      for (std::uint32_t n = 0; n < s.tokens; ++n) {
        const bool decoded = rank_of[n] < unmask.decoded[t];
        if (decoded && spec.decoded_mode == DecodedMode::Drop) trace.set_active(step, n, false);
        for (std::uint32_t l = 0; l < s.layers; ++l) {
          auto sel = trace.selection(step, l, n);
          auto draw = [&](std::span<const ExpertId> taken) {
            const auto& w = rng.bernoulli(mix) ? content_weights[l] : mask_weights[l];
            return detail::draw_excluding(w, taken, rng);
          };
          if (t == 0) {
            for (std::uint32_t j = 0; j < s.top_k; ++j) sel[j] = draw(sel.first(j));
            continue;
          }
          auto prev = std::as_const(trace).selection(step - 1, l, n);
          std::copy(prev.begin(), prev.end(), sel.begin());
          if (decoded) continue;
          // Decide survivors first so replacements avoid every kept expert.
          kept.clear();
          std::vector<bool> survive(s.top_k);
          for (std::uint32_t j = 0; j < s.top_k; ++j) {
            survive[j] = rng.bernoulli(spec.persistence);
            if (survive[j]) kept.push_back(sel[j]);
          }
          for (std::uint32_t j = 0; j < s.top_k; ++j) {
            if (survive[j]) continue;
            sel[j] = draw(kept);
            kept.push_back(sel[j]);
          }
        }
      }
    }
  }
#if MOESIM_DEBUG_CHECKS
  validate(trace);
#endif
  return trace;
}

// ---------------------------------------------------------------------------
// Analytics

inline void check_layer(const RoutingTrace& trace, std::uint32_t layer) {
  if (layer >= trace.shape().layers) {
    throw Error(ErrorCode::LayerOutOfRange, "layer " + std::to_string(layer) + " >= " +
                                                std::to_string(trace.shape().layers));
  }
}

inline void check_block(const RoutingTrace& trace, std::uint32_t block) {
  if (block >= trace.blocks()) {
    throw Error(ErrorCode::DimensionMismatch, "block " + std::to_string(block) + " >= " +
                                                  std::to_string(trace.blocks()));
  }
}

/// Token hits per expert at one (global) step and layer, active tokens only.
inline std::vector<std::uint64_t> step_counts(const RoutingTrace& trace, std::uint32_t step,
                                              std::uint32_t layer) {
  std::vector<std::uint64_t> c(trace.shape().experts, 0);
  for (std::uint32_t n = 0; n < trace.shape().tokens; ++n) {
    if (!trace.active(step, n)) continue;
    for (ExpertId e : trace.selection(step, layer, n)) ++c[e];
  }
  return c;
}

inline double cosine(std::span<const std::uint64_t> a, std::span<const std::uint64_t> b) {
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double x = static_cast<double>(a[i]);
    const double y = static_cast<double>(b[i]);
    dot += x * y;
    na += x * x;
    nb += y * y;
  }
  if (na == 0.0 || nb == 0.0) return 0.0;
  if (std::equal(a.begin(), a.end(), b.begin())) return 1.0;
  return std::min(1.0, dot / std::sqrt(na * nb));
}

struct SimilarityMatrix {
  std::uint32_t size = 0;
  std::vector<double> values;  // row major, size x size

  double at(std::uint32_t s, std::uint32_t t) const { return values[static_cast<std::size_t>(s) * size + t]; }

  // Mean of values[t][t+lag] over all t.
  double mean_at_lag(std::uint32_t lag) const {
    if (lag >= size) return 0.0;
    double sum = 0.0;
    for (std::uint32_t t = 0; t + lag < size; ++t) sum += at(t, t + lag);
    return sum / (size - lag);
  }
};

struct LayerSelector {
  std::optional<std::uint32_t> layer;  // nullopt: average over all layers

  static LayerSelector all() { return {}; }
  static LayerSelector only(std::uint32_t l) { return {l}; }
};

// Per-step activation vector used for similarity.
enum class Activation {
  Counts,  // token hits per expert
  Binary,  // 1 if any token hit the expert
};

/// Cosine similarity between the per-step expert activation vectors of one
/// block. With LayerSelector::all() the per-layer matrices are averaged.
inline SimilarityMatrix similarity_matrix(const RoutingTrace& trace, LayerSelector which,
                                          std::uint32_t block = 0, Activation act = Activation::Counts) {
  check_block(trace, block);
  const std::uint32_t T = trace.shape().block_size;
  std::vector<std::uint32_t> layers;
  if (which.layer) {
    check_layer(trace, *which.layer);
    layers.push_back(*which.layer);
  } else {
    layers.resize(trace.shape().layers);
    std::iota(layers.begin(), layers.end(), 0u);
  }
  SimilarityMatrix m{T, std::vector<double>(static_cast<std::size_t>(T) * T, 0.0)};
  for (std::uint32_t l : layers) {
    std::vector<std::vector<std::uint64_t>> counts(T);
    for (std::uint32_t t = 0; t < T; ++t) {
      counts[t] = step_counts(trace, block * T + t, l);
      if (act == Activation::Binary)
        for (auto& c : counts[t]) c = c > 0 ? 1 : 0;
    }
    for (std::uint32_t s = 0; s < T; ++s) {
      for (std::uint32_t t = s; t < T; ++t) {
        const double c = cosine(counts[s], counts[t]);
        m.values[static_cast<std::size_t>(s) * T + t] += c;
        if (s != t) m.values[static_cast<std::size_t>(t) * T + s] += c;
      }
    }
  }
  for (auto& v : m.values) v /= static_cast<double>(layers.size());
  return m;
}

inline std::vector<std::uint32_t> unique_experts_per_step(const RoutingTrace& trace,
                                                          std::uint32_t layer,
                                                          std::uint32_t block = 0) {
  check_layer(trace, layer);
  check_block(trace, block);
  const std::uint32_t T = trace.shape().block_size;
  std::vector<std::uint32_t> out(T);
  for (std::uint32_t t = 0; t < T; ++t) {
    const auto c = step_counts(trace, block * T + t, layer);
    out[t] = static_cast<std::uint32_t>(std::count_if(c.begin(), c.end(), [](auto x) { return x > 0; }));
  }
  return out;
}

struct DriftSeries {
  std::vector<double> values;  // values[i] is d_{i+1}
  double mean = 0.0;
};

/// Fraction of the top-`budget` expert set (by step hits) that changes
/// between consecutive steps of a block.
inline DriftSeries drift_rate(const RoutingTrace& trace, std::uint32_t layer, std::uint32_t budget,
                              std::uint32_t block = 0) {
  check_layer(trace, layer);
  check_block(trace, block);
  if (budget < 1 || budget > trace.shape().experts) {
    throw Error(ErrorCode::BudgetExceedsExperts, "budget " + std::to_string(budget) +
                                                     " outside [1, experts]");
  }
  const std::uint32_t T = trace.shape().block_size;
  DriftSeries out;
  auto prev = top_b(step_counts(trace, block * T, layer), budget);
  for (std::uint32_t t = 1; t < T; ++t) {
    auto cur = top_b(step_counts(trace, block * T + t, layer), budget);
    std::vector<ExpertId> diff;
    std::set_difference(cur.begin(), cur.end(), prev.begin(), prev.end(), std::back_inserter(diff));
    out.values.push_back(static_cast<double>(diff.size()) / budget);
    prev = std::move(cur);
  }
  if (!out.values.empty()) {
    out.mean = std::accumulate(out.values.begin(), out.values.end(), 0.0) / out.values.size();
  }
  return out;
}

/// Mean drift over every layer and block.
inline double mean_drift(const RoutingTrace& trace, std::uint32_t budget) {
  if (trace.shape().block_size < 2) return 0.0;
  double sum = 0.0;
  for (std::uint32_t b = 0; b < trace.blocks(); ++b)
    for (std::uint32_t l = 0; l < trace.shape().layers; ++l) sum += drift_rate(trace, l, budget, b).mean;
  return sum / (static_cast<double>(trace.blocks()) * trace.shape().layers);
}

/// Mean similarity between adjacent steps, over every layer and block.
inline double mean_adjacent_similarity(const RoutingTrace& trace, Activation act = Activation::Counts) {
  if (trace.shape().block_size < 2) return 1.0;
  double sum = 0.0;
  for (std::uint32_t b = 0; b < trace.blocks(); ++b)
    for (std::uint32_t l = 0; l < trace.shape().layers; ++l)
      sum += similarity_matrix(trace, LayerSelector::only(l), b, act).mean_at_lag(1);
  return sum / (static_cast<double>(trace.blocks()) * trace.shape().layers);
}

// ---------------------------------------------------------------------------
// CSV exports

inline std::string similarity_csv(const SimilarityMatrix& m) {
  std::ostringstream os;
  os << "t,s,value\n";
  for (std::uint32_t t = 0; t < m.size; ++t)
    for (std::uint32_t s = 0; s < m.size; ++s) os << t << ',' << s << ',' << io::format_double(m.at(t, s)) << '\n';
  return os.str();
}

inline std::string drift_csv(const DriftSeries& d) {
  std::ostringstream os;
  os << "t,d_t\n";
  for (std::size_t i = 0; i < d.values.size(); ++i) os << i + 1 << ',' << io::format_double(d.values[i]) << '\n';
  return os.str();
}

inline std::string unique_csv(const std::vector<std::uint32_t>& u) {
  std::ostringstream os;
  os << "t,unique\n";
  for (std::size_t t = 0; t < u.size(); ++t) os << t << ',' << u[t] << '\n';
  return os.str();
}

// ---------------------------------------------------------------------------
// Trace files
//
// Text (canonical):
//   moe-routing-trace
//   schema_version 1
//   layers L
//   experts E
//   top_k k
//   block_size T
//   tokens N
//   gpu_budget B
//   blocks b
//   records
//   <step> <layer> <token> <e_1> ... <e_k>      one line per (step, layer, token)
//   <step> <layer> <token> - <e_1> ... <e_k>    same, token inactive
//   end
//
// Binary: magic "MOETRACE", then little-endian u32 schema_version, L, E, k,
// T, N, B, blocks, then one byte per (step, token) activity flag, then one
// u32 per expert slot in (step, layer, token, rank) order.

inline constexpr std::uint32_t kTraceSchemaVersion = 1;
inline constexpr std::string_view kTraceMagic = "MOETRACE";

inline std::string to_text(const RoutingTrace& trace) {
  const auto& s = trace.shape();
  std::ostringstream os;
  os << "moe-routing-trace\n"
     << "schema_version " << kTraceSchemaVersion << '\n'
     << "layers " << s.layers << '\n'
     << "experts " << s.experts << '\n'
     << "top_k " << s.top_k << '\n'
     << "block_size " << s.block_size << '\n'
     << "tokens " << s.tokens << '\n'
     << "gpu_budget " << s.gpu_budget << '\n'
     << "blocks " << trace.blocks() << '\n'
     << "records\n";
  for (std::uint32_t t = 0; t < trace.total_steps(); ++t) {
    for (std::uint32_t l = 0; l < s.layers; ++l) {
      for (std::uint32_t n = 0; n < s.tokens; ++n) {
        os << t << ' ' << l << ' ' << n;
        if (!trace.active(t, n)) os << " -";
        for (ExpertId e : trace.selection(t, l, n)) os << ' ' << e;
        os << '\n';
      }
    }
  }
  os << "end\n";
  return os.str();
}

namespace detail {

class LineReader {
 public:
  explicit LineReader(std::string_view text) : text_(text) {}

  std::string_view next() {
    if (pos_ >= text_.size()) throw Error(ErrorCode::ParseError, "unexpected end of file at line " + std::to_string(line_ + 1));
    auto end = text_.find('\n', pos_);
    if (end == std::string_view::npos) throw Error(ErrorCode::ParseError, "unterminated line " + std::to_string(line_ + 1));
    auto line = text_.substr(pos_, end - pos_);
    pos_ = end + 1;
    ++line_;
    return line;
  }

  std::size_t line() const { return line_; }

 private:
  std::string_view text_;
  std::size_t pos_ = 0;
  std::size_t line_ = 0;
};

inline std::vector<std::string_view> split_ws(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && line[i] == ' ') ++i;
    auto j = i;
    while (j < line.size() && line[j] != ' ') ++j;
    if (j > i) out.push_back(line.substr(i, j - i));
    i = j;
  }
  return out;
}

inline std::uint32_t header_field(LineReader& r, std::string_view key) {
  auto parts = split_ws(r.next());
  if (parts.size() != 2 || parts[0] != key) {
    throw Error(ErrorCode::ParseError, "line " + std::to_string(r.line()) + ": expected '" + std::string(key) + " <n>'");
  }
  auto v = io::parse_uint(parts[1]);
  if (v > UINT32_MAX) throw Error(ErrorCode::ParseError, std::string(key) + " too large");
  return static_cast<std::uint32_t>(v);
}

inline void check_version(std::uint32_t v) {
  if (v != kTraceSchemaVersion) {
    throw Error(ErrorCode::SchemaVersionMismatch, "trace schema_version " + std::to_string(v) +
                                                      ", supported " + std::to_string(kTraceSchemaVersion));
  }
}

// Rejects headers that would make the reader allocate absurd amounts.
inline void check_header_size(const ModelShape& s, std::uint32_t blocks, std::size_t payload_hint) {
  const long double slots = static_cast<long double>(blocks) * s.block_size * s.layers * s.tokens * s.top_k;
  if (slots > static_cast<long double>(payload_hint) + 1) {
    throw Error(ErrorCode::ParseError, "header promises more records than the file holds");
  }
}

}  // namespace detail

inline RoutingTrace from_text(std::string_view text) {
  detail::LineReader r(text);
  if (r.next() != "moe-routing-trace") throw Error(ErrorCode::ParseError, "missing trace magic line");
  detail::check_version(detail::header_field(r, "schema_version"));
  ModelShape s;
  s.layers = detail::header_field(r, "layers");
  s.experts = detail::header_field(r, "experts");
  s.top_k = detail::header_field(r, "top_k");
  s.block_size = detail::header_field(r, "block_size");
  s.tokens = detail::header_field(r, "tokens");
  s.gpu_budget = detail::header_field(r, "gpu_budget");
  const auto blocks = detail::header_field(r, "blocks");
  try {
    s.validate();
  } catch (const Error& e) {
    throw Error(ErrorCode::ParseError, e.what());
  }
  if (blocks < 1) throw Error(ErrorCode::ParseError, "blocks must be >= 1");
  detail::check_header_size(s, blocks, text.size() / 2);
  if (r.next() != "records") throw Error(ErrorCode::ParseError, "expected 'records'");

  RoutingTrace trace(s, blocks);
  for (std::uint32_t t = 0; t < trace.total_steps(); ++t) {
    for (std::uint32_t l = 0; l < s.layers; ++l) {
      for (std::uint32_t n = 0; n < s.tokens; ++n) {
        auto parts = detail::split_ws(r.next());
        const bool inactive = parts.size() == 4 + s.top_k && parts[3] == "-";
        if (parts.size() != 3 + s.top_k && !inactive) {
          throw Error(ErrorCode::ParseError, "line " + std::to_string(r.line()) + ": wrong field count");
        }
        if (io::parse_uint(parts[0]) != t || io::parse_uint(parts[1]) != l || io::parse_uint(parts[2]) != n) {
          throw Error(ErrorCode::ParseError, "line " + std::to_string(r.line()) + ": records out of order");
        }
        if (l == 0) trace.set_active(t, n, !inactive);
        else if (trace.active(t, n) == inactive) {
          throw Error(ErrorCode::ParseError, "line " + std::to_string(r.line()) + ": activity differs across layers");
        }
        auto sel = trace.selection(t, l, n);
        const std::size_t first = inactive ? 4 : 3;
        for (std::uint32_t j = 0; j < s.top_k; ++j) {
          auto v = io::parse_uint(parts[first + j]);
          if (v > UINT32_MAX) throw Error(ErrorCode::ParseError, "expert id too large");
          sel[j] = static_cast<ExpertId>(v);
        }
      }
    }
  }
  if (r.next() != "end") throw Error(ErrorCode::ParseError, "expected 'end'");
  validate(trace);
  return trace;
}

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline std::uint32_t get_u32(std::string_view data, std::size_t& pos) {
  if (pos + 4 > data.size()) throw Error(ErrorCode::ParseError, "truncated binary trace");
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(data[pos + i])) << (8 * i);
  pos += 4;
  return v;
}

}  // namespace detail

inline std::string to_binary(const RoutingTrace& trace) {
  const auto& s = trace.shape();
  std::string out(kTraceMagic);
  for (std::uint32_t v : {kTraceSchemaVersion, s.layers, s.experts, s.top_k, s.block_size, s.tokens,
                          s.gpu_budget, trace.blocks()}) {
    detail::put_u32(out, v);
  }
  for (auto a : trace.raw_active()) out.push_back(static_cast<char>(a));
  for (auto e : trace.raw_experts()) detail::put_u32(out, e);
  return out;
}

inline RoutingTrace from_binary(std::string_view data) {
  if (data.substr(0, kTraceMagic.size()) != kTraceMagic) throw Error(ErrorCode::ParseError, "missing binary trace magic");
  std::size_t pos = kTraceMagic.size();
  detail::check_version(detail::get_u32(data, pos));
  ModelShape s;
  s.layers = detail::get_u32(data, pos);
  s.experts = detail::get_u32(data, pos);
  s.top_k = detail::get_u32(data, pos);
  s.block_size = detail::get_u32(data, pos);
  s.tokens = detail::get_u32(data, pos);
  s.gpu_budget = detail::get_u32(data, pos);
  const auto blocks = detail::get_u32(data, pos);
  try {
    s.validate();
  } catch (const Error& e) {
    throw Error(ErrorCode::ParseError, e.what());
  }
  if (blocks < 1) throw Error(ErrorCode::ParseError, "blocks must be >= 1");
  detail::check_header_size(s, blocks, data.size() / 4);
  RoutingTrace trace(s, blocks);
  auto& active = trace.raw_active();
  if (pos + active.size() > data.size()) throw Error(ErrorCode::ParseError, "truncated binary trace");
  for (auto& a : active) {
    const auto byte = static_cast<unsigned char>(data[pos++]);
    if (byte > 1) throw Error(ErrorCode::ParseError, "bad activity flag");
    a = byte;
  }
  for (auto& e : trace.raw_experts()) e = detail::get_u32(data, pos);
  if (pos != data.size()) throw Error(ErrorCode::ParseError, "trailing bytes in binary trace");
  validate(trace);
  return trace;
}

enum class TraceFormat { Text, Binary };

inline TraceFormat format_for(const std::filesystem::path& path) {
  return path.extension() == ".tbin" ? TraceFormat::Binary : TraceFormat::Text;
}

inline void save(const RoutingTrace& trace, const std::filesystem::path& path,
                 std::optional<TraceFormat> format = std::nullopt) {
  const auto f = format.value_or(format_for(path));
  io::write_file_atomic(path, f == TraceFormat::Binary ? to_binary(trace) : to_text(trace));
}

/// Reads either format; the binary one is recognized by its magic bytes.
inline RoutingTrace load(const std::filesystem::path& path) {
  const auto data = io::read_file(path);
  if (std::string_view(data).substr(0, kTraceMagic.size()) == kTraceMagic) return from_binary(data);
  return from_text(data);
}

}  // namespace moesim
