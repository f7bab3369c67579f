#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "rml/dataset.hpp"
#include "rml/error.hpp"
#include "rml/linalg.hpp"
#include "rml/rng.hpp"

namespace rml {

struct EncoderConfig {
  int raw_dim = 64;
  int embed_dim = 32;
  int n_tokens = 8;
  int hidden_dim = 64;  // defaults to 2 * embed_dim

  void validate() const {
    if (raw_dim < 2) throw config_error("raw_dim must be >= 2");
    if (embed_dim < 2) throw config_error("embed_dim must be >= 2");
    if (n_tokens < 2) throw config_error("n_tokens must be >= 2");
    if (hidden_dim < 1) throw config_error("hidden_dim must be >= 1");
  }
};

struct SelectRatio {
  double value = 0.3;

  void validate(int n_tokens) const {
    if (!(value > 0.0 && value <= 1.0))
      throw config_error("select ratio must lie in (0, 1]");
    if (static_cast<int>(std::floor(value * n_tokens)) < 1)
      throw config_error("select ratio keeps zero tokens");
  }
};

/// Per-modality trainable parameters. The token projections plus the global
/// query form the shared backbone; mlp_*/fc_* belong to the token-selection
/// head and feed only the tse embedding.
struct ModalityParams {
  std::vector<Mat> token_proj;  // n_tokens matrices, each embed_dim x raw_dim
  Mat token_bias;               // n_tokens x embed_dim
  Vec global_query;             // embed_dim
  Mat mlp_w1;                   // hidden_dim x embed_dim
  Vec mlp_b1;                   // hidden_dim
  Mat mlp_w2;                   // embed_dim x hidden_dim
  Vec mlp_b2;                   // embed_dim
  Mat fc_w;                     // embed_dim x embed_dim
  Vec fc_b;                     // embed_dim
};

enum class Modality { image, text };

struct EncoderParams {
  EncoderConfig cfg;
  ModalityParams image;
  ModalityParams text;

  const ModalityParams& modality(Modality m) const {
    return m == Modality::image ? image : text;
  }
  ModalityParams& modality(Modality m) {
    return m == Modality::image ? image : text;
  }
};

namespace detail {

inline void fill_gaussian(std::span<double> v, SplitMix64& rng, double scale) {
  for (double& x : v) x = scale * rng.next_gaussian();
}

inline ModalityParams init_modality(const EncoderConfig& c, SplitMix64& rng) {
  ModalityParams p;
  p.token_proj.assign(c.n_tokens, Mat(c.embed_dim, c.raw_dim));
  const double proj_scale = 1.0 / std::sqrt(double(c.raw_dim));
  for (Mat& m : p.token_proj) fill_gaussian(m.a, rng, proj_scale);
  p.token_bias = Mat(c.n_tokens, c.embed_dim);
  p.global_query.resize(c.embed_dim);
  fill_gaussian(p.global_query, rng, 1.0);
  p.mlp_w1 = Mat(c.hidden_dim, c.embed_dim);
  fill_gaussian(p.mlp_w1.a, rng, 1.0 / std::sqrt(double(c.embed_dim)));
  p.mlp_b1.assign(c.hidden_dim, 0.0);
  p.mlp_w2 = Mat(c.embed_dim, c.hidden_dim);
  fill_gaussian(p.mlp_w2.a, rng, 1.0 / std::sqrt(double(c.hidden_dim)));
  p.mlp_b2.assign(c.embed_dim, 0.0);
  p.fc_w = Mat(c.embed_dim, c.embed_dim);
  fill_gaussian(p.fc_w.a, rng, 1.0 / std::sqrt(double(c.embed_dim)));
  p.fc_b.assign(c.embed_dim, 0.0);
  return p;
}

}  // namespace detail

inline EncoderParams init_params(const EncoderConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  SplitMix64 rng(seed);
  EncoderParams p;
  p.cfg = cfg;
  p.image = detail::init_modality(cfg, rng);
  p.text = detail::init_modality(cfg, rng);
  return p;
}

// ---------------------------------------------------------------------------
// Forward pass
// ---------------------------------------------------------------------------

/// Per-item, per-modality encoding. tokens is n_tokens x embed_dim flat.
struct Encoding {
  Vec tokens;
  Vec scores;
  Vec attn;
  Vec global;
  Vec bge;
  std::vector<int> selected;
  Vec tse_pre;
  Vec tse;
};

/// tokens[j] = tanh(P_j raw); attn = softmax(tokens . q / sqrt(d));
/// global = sum_j attn[j] tokens[j]; bge = normalize(global).
inline Encoding encode(const ModalityParams& p, const EncoderConfig& cfg,
                       std::span<const double> raw) {
  if (static_cast<int>(raw.size()) != cfg.raw_dim)
    throw shape_error("encode: raw vector has wrong dimension");
  const int d = cfg.embed_dim;
  const int t = cfg.n_tokens;
  Encoding e;
  e.tokens.resize(static_cast<std::size_t>(t) * d);
  e.scores.resize(t);
  const double inv_sqrt_d = 1.0 / std::sqrt(double(d));
  for (int j = 0; j < t; ++j) {
    Vec z = matvec(p.token_proj[j], raw);
    for (int k = 0; k < d; ++k)
      e.tokens[static_cast<std::size_t>(j) * d + k] =
          std::tanh(z[k] + p.token_bias(j, k));
    e.scores[j] =
        dot({e.tokens.data() + static_cast<std::size_t>(j) * d,
             static_cast<std::size_t>(d)},
            p.global_query) *
        inv_sqrt_d;
  }
  e.attn = e.scores;
  softmax_inplace(e.attn);
  e.global.assign(d, 0.0);
  for (int j = 0; j < t; ++j)
    add_scaled(e.global,
               {e.tokens.data() + static_cast<std::size_t>(j) * d,
                static_cast<std::size_t>(d)},
               e.attn[j]);
  e.bge = normalized(e.global);
  return e;
}

/// Indices of the floor(ratio * n) largest attention weights, ties resolved
/// toward the lower index, returned in original token order.
inline std::vector<int> select_token_indices(std::span<const double> attn,
                                             SelectRatio ratio) {
  const int n = static_cast<int>(attn.size());
  ratio.validate(n);
  const int k = static_cast<int>(std::floor(ratio.value * n));
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    if (attn[a] != attn[b]) return attn[a] > attn[b];
    return a < b;
  });
  order.resize(k);
  std::sort(order.begin(), order.end());
  return order;
}

/// (selected tokens, selected weights) view of select_token_indices.
inline std::pair<std::vector<Vec>, Vec> select_tokens(
    std::span<const double> tokens_flat, std::span<const double> attn,
    int embed_dim, SelectRatio ratio) {
  auto idx = select_token_indices(attn, ratio);
  std::vector<Vec> toks;
  Vec weights;
  toks.reserve(idx.size());
  weights.reserve(idx.size());
  for (int j : idx) {
    const double* base = tokens_flat.data() + static_cast<std::size_t>(j) * embed_dim;
    toks.emplace_back(base, base + embed_dim);
    weights.push_back(attn[j]);
  }
  return {std::move(toks), std::move(weights)};
}

namespace detail {

/// y = mlp(x) + fc(x) for one normalized token.
inline Vec head_transform(const ModalityParams& p, std::span<const double> x,
                          Vec* hidden_out = nullptr) {
  Vec pre = matvec(p.mlp_w1, x);
  for (std::size_t i = 0; i < pre.size(); ++i) pre[i] += p.mlp_b1[i];
  for (double& h : pre) h = std::tanh(h);
  Vec y = matvec(p.mlp_w2, pre);
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += p.mlp_b2[i];
  Vec fc = matvec(p.fc_w, x);
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += fc[i] + p.fc_b[i];
  if (hidden_out) *hidden_out = std::move(pre);
  return y;
}

}  // namespace detail

/// Normalizes each selected token, applies mlp(x)+fc(x), takes the
/// elementwise max over tokens, and normalizes the result.
inline Vec tse_embed(const ModalityParams& p, const EncoderConfig& cfg,
                     std::span<const Vec> selected) {
  if (selected.empty())
    throw contract_error("tse_embed: needs at least one selected token");
  Vec best;
  for (const Vec& tok : selected) {
    if (static_cast<int>(tok.size()) != cfg.embed_dim)
      throw shape_error("tse_embed: token has wrong dimension");
    Vec y = detail::head_transform(p, normalized(tok));
    if (best.empty()) {
      best = std::move(y);
    } else {
      for (std::size_t k = 0; k < best.size(); ++k)
        best[k] = std::max(best[k], y[k]);
    }
  }
  return normalized(best);
}

/// Full per-item encoding for one modality, including the selection head.
inline Encoding encode_full(const ModalityParams& p, const EncoderConfig& cfg,
                            std::span<const double> raw, SelectRatio ratio) {
  Encoding e = encode(p, cfg, raw);
  e.selected = select_token_indices(e.attn, ratio);
  const int d = cfg.embed_dim;
  e.tse_pre.clear();
  for (int j : e.selected) {
    Vec x = normalized({e.tokens.data() + static_cast<std::size_t>(j) * d,
                        static_cast<std::size_t>(d)});
    Vec y = detail::head_transform(p, x);
    if (e.tse_pre.empty()) {
      e.tse_pre = std::move(y);
    } else {
      for (int k = 0; k < d; ++k) e.tse_pre[k] = std::max(e.tse_pre[k], y[k]);
    }
  }
  e.tse = normalized(e.tse_pre);
  return e;
}

inline double bge_similarity(const Encoding& a, const Encoding& b) {
  return cosine(a.global, b.global);
}

inline double tse_similarity(const Encoding& a, const Encoding& b) {
  return cosine(a.tse, b.tse);
}

// ---------------------------------------------------------------------------
// Backward pass (analytic; selection and max-pool argmax treated as constant)
// ---------------------------------------------------------------------------

namespace detail {

/// Backward through x_hat = x / max(|x|, eps). Returns dL/dx given dL/dx_hat.
inline Vec normalize_backward(std::span<const double> x,
                              std::span<const double> x_hat,
                              std::span<const double> d_hat) {
  const double n = l2_norm(x);
  Vec out(x.size());
  if (n > kNormEps) {
    const double proj = dot(x_hat, d_hat);
    for (std::size_t i = 0; i < x.size(); ++i)
      out[i] = (d_hat[i] - x_hat[i] * proj) / n;
  } else {
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = d_hat[i] / kNormEps;
  }
  return out;
}

}  // namespace detail

/// Gradient accumulator shaped like ModalityParams.
inline ModalityParams zero_like(const ModalityParams& p) {
  ModalityParams g;
  g.token_proj.assign(p.token_proj.size(),
                      Mat(p.token_proj[0].rows, p.token_proj[0].cols));
  g.token_bias = Mat(p.token_bias.rows, p.token_bias.cols);
  g.global_query.assign(p.global_query.size(), 0.0);
  g.mlp_w1 = Mat(p.mlp_w1.rows, p.mlp_w1.cols);
  g.mlp_b1.assign(p.mlp_b1.size(), 0.0);
  g.mlp_w2 = Mat(p.mlp_w2.rows, p.mlp_w2.cols);
  g.mlp_b2.assign(p.mlp_b2.size(), 0.0);
  g.fc_w = Mat(p.fc_w.rows, p.fc_w.cols);
  g.fc_b.assign(p.fc_b.size(), 0.0);
  return g;
}

inline EncoderParams zero_like(const EncoderParams& p) {
  EncoderParams g;
  g.cfg = p.cfg;
  g.image = zero_like(p.image);
  g.text = zero_like(p.text);
  return g;
}

/// Accumulates parameter gradients for one item given the loss gradients
/// w.r.t. its unit bge and tse embeddings.
inline void encode_backward(const ModalityParams& p, const EncoderConfig& cfg,
                            std::span<const double> raw, const Encoding& e,
                            std::span<const double> d_bge,
                            std::span<const double> d_tse,
                            ModalityParams& grad) {
  const int d = cfg.embed_dim;
  const int t = cfg.n_tokens;
  const double inv_sqrt_d = 1.0 / std::sqrt(double(d));
  Vec d_tokens(static_cast<std::size_t>(t) * d, 0.0);

  auto token_view = [&](int j) -> std::span<const double> {
    return {e.tokens.data() + static_cast<std::size_t>(j) * d,
            static_cast<std::size_t>(d)};
  };

  // Global-embedding path.
  {
    Vec d_global = detail::normalize_backward(e.global, e.bge, d_bge);
    Vec d_attn(t, 0.0);
    for (int j = 0; j < t; ++j) {
      d_attn[j] = dot(token_view(j), d_global);
      for (int k = 0; k < d; ++k)
        d_tokens[static_cast<std::size_t>(j) * d + k] +=
            e.attn[j] * d_global[k];
    }
    double weighted = 0.0;
    for (int j = 0; j < t; ++j) weighted += e.attn[j] * d_attn[j];
    for (int j = 0; j < t; ++j) {
      const double d_score = e.attn[j] * (d_attn[j] - weighted);
      const double c = d_score * inv_sqrt_d;
      for (int k = 0; k < d; ++k) {
        d_tokens[static_cast<std::size_t>(j) * d + k] +=
            c * p.global_query[k];
        grad.global_query[k] += c * token_view(j)[k];
      }
    }
  }

  // Token-selection path.
  if (!e.selected.empty()) {
    Vec d_pool = detail::normalize_backward(e.tse_pre, e.tse, d_tse);
    const int s = static_cast<int>(e.selected.size());
    std::vector<Vec> x_hat(s), hidden(s), y(s);
    for (int si = 0; si < s; ++si) {
      x_hat[si] = normalized(token_view(e.selected[si]));
      y[si] = detail::head_transform(p, x_hat[si], &hidden[si]);
    }
    // Recover the per-coordinate argmax exactly as the forward max did
    // (strictly-greater update keeps the first winner on ties).
    std::vector<int> winner(d, 0);
    for (int si = 1; si < s; ++si)
      for (int k = 0; k < d; ++k)
        if (y[si][k] > y[winner[k]][k]) winner[k] = si;
    for (int si = 0; si < s; ++si) {
      Vec dy(d, 0.0);
      bool any = false;
      for (int k = 0; k < d; ++k)
        if (winner[k] == si) {
          dy[k] = d_pool[k];
          any = any || dy[k] != 0.0;
        }
      if (!any) continue;
      // y = W2 tanh(W1 x + b1) + b2 + F x + fb
      add_outer(grad.mlp_w2, dy, hidden[si]);
      for (int k = 0; k < d; ++k) grad.mlp_b2[k] += dy[k];
      Vec dh = matvec_t(p.mlp_w2, dy);
      add_outer(grad.fc_w, dy, x_hat[si]);
      for (int k = 0; k < d; ++k) grad.fc_b[k] += dy[k];
      Vec dx = matvec_t(p.fc_w, dy);
      for (std::size_t i = 0; i < dh.size(); ++i)
        dh[i] *= 1.0 - hidden[si][i] * hidden[si][i];
      add_outer(grad.mlp_w1, dh, x_hat[si]);
      for (std::size_t i = 0; i < dh.size(); ++i) grad.mlp_b1[i] += dh[i];
      Vec dx2 = matvec_t(p.mlp_w1, dh);
      for (int k = 0; k < d; ++k) dx[k] += dx2[k];
      const int j = e.selected[si];
      Vec du = detail::normalize_backward(token_view(j), x_hat[si], dx);
      for (int k = 0; k < d; ++k)
        d_tokens[static_cast<std::size_t>(j) * d + k] += du[k];
    }
  }

  // Tokens back to the projections: u = tanh(P raw + b).
  for (int j = 0; j < t; ++j) {
    const auto u = token_view(j);
    Vec dz(d);
    bool any = false;
    for (int k = 0; k < d; ++k) {
      dz[k] = d_tokens[static_cast<std::size_t>(j) * d + k] *
              (1.0 - u[k] * u[k]);
      any = any || dz[k] != 0.0;
    }
    if (!any) continue;
    add_outer(grad.token_proj[j], dz, raw);
    for (int k = 0; k < d; ++k) grad.token_bias(j, k) += dz[k];
  }
}

// ---------------------------------------------------------------------------
// Flat parameter packing (optimizer and finite-difference checks)
// ---------------------------------------------------------------------------

namespace detail {

template <typename F>
void for_each_block(ModalityParams& p, F&& f) {
  for (Mat& m : p.token_proj) f(m.a);
  f(p.token_bias.a);
  f(p.global_query);
  f(p.mlp_w1.a);
  f(p.mlp_b1);
  f(p.mlp_w2.a);
  f(p.mlp_b2);
  f(p.fc_w.a);
  f(p.fc_b);
}

template <typename F>
void for_each_block(const ModalityParams& p, F&& f) {
  for (const Mat& m : p.token_proj) f(m.a);
  f(p.token_bias.a);
  f(p.global_query);
  f(p.mlp_w1.a);
  f(p.mlp_b1);
  f(p.mlp_w2.a);
  f(p.mlp_b2);
  f(p.fc_w.a);
  f(p.fc_b);
}

}  // namespace detail

inline std::size_t param_count(const EncoderParams& p) {
  std::size_t n = 0;
  auto count = [&](const Vec& v) { n += v.size(); };
  detail::for_each_block(p.image, count);
  detail::for_each_block(p.text, count);
  return n;
}

inline Vec pack_params(const EncoderParams& p) {
  Vec out;
  out.reserve(param_count(p));
  auto push = [&](const Vec& v) { out.insert(out.end(), v.begin(), v.end()); };
  detail::for_each_block(p.image, push);
  detail::for_each_block(p.text, push);
  return out;
}

inline void unpack_params(std::span<const double> flat, EncoderParams& p) {
  std::size_t pos = 0;
  auto pull = [&](Vec& v) {
    if (pos + v.size() > flat.size())
      throw shape_error("unpack_params: flat vector too short");
    std::copy(flat.begin() + pos, flat.begin() + pos + v.size(), v.begin());
    pos += v.size();
  };
  detail::for_each_block(p.image, pull);
  detail::for_each_block(p.text, pull);
  if (pos != flat.size())
    throw shape_error("unpack_params: flat vector size mismatch");
}

// ---------------------------------------------------------------------------
// Checkpoint serialization (text, exact round-trip)
// ---------------------------------------------------------------------------

namespace detail {

inline const char* kBlockNames[] = {"token_proj", "token_bias", "global_query",
                                    "mlp_w1",     "mlp_b1",     "mlp_w2",
                                    "mlp_b2",     "fc_w",       "fc_b"};

inline void write_block(std::ofstream& f, const std::string& name,
                        const Vec& v) {
  f << "block " << name << ' ' << v.size() << '\n';
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) f << ' ';
    f << format_double(v[i]);
  }
  f << '\n';
}

inline void write_modality(std::ofstream& f, const std::string& prefix,
                           const ModalityParams& p) {
  int bi = 0;
  std::size_t proj_i = 0;
  for_each_block(p, [&](const Vec& v) {
    std::string name = prefix + ".";
    if (bi == 0 && proj_i < p.token_proj.size()) {
      name += std::string(kBlockNames[0]) + "[" + std::to_string(proj_i) + "]";
      if (++proj_i == p.token_proj.size()) bi = 1;
    } else {
      name += kBlockNames[bi];
      ++bi;
    }
    write_block(f, name, v);
  });
}

}  // namespace detail

inline void save_checkpoint(const EncoderParams& p, SelectRatio ratio,
                            const std::string& path) {
  std::ofstream f(path);
  if (!f) throw io_error("cannot open for writing: " + path);
  f << "rml_checkpoint_v1\n";
  f << "raw_dim " << p.cfg.raw_dim << "\nembed_dim " << p.cfg.embed_dim
    << "\nn_tokens " << p.cfg.n_tokens << "\nhidden_dim " << p.cfg.hidden_dim
    << "\nselect_ratio " << detail::format_double(ratio.value) << "\n";
  detail::write_modality(f, "image", p.image);
  detail::write_modality(f, "text", p.text);
  f << "end\n";
  if (!f) throw io_error("write failed: " + path);
}

struct Checkpoint {
  EncoderParams params;
  SelectRatio ratio;
};

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw io_error("cannot open: " + path);
  std::string word;
  if (!(f >> word) || word != "rml_checkpoint_v1")
    throw io_error("bad checkpoint magic in " + path);
  EncoderConfig cfg;
  SelectRatio ratio;
  auto read_kv = [&](const char* key, auto& out) {
    std::string k;
    if (!(f >> k) || k != key) throw io_error("checkpoint missing " +
                                              std::string(key) + ": " + path);
    if (!(f >> out)) throw io_error("checkpoint bad value for " +
                                    std::string(key) + ": " + path);
  };
  read_kv("raw_dim", cfg.raw_dim);
  read_kv("embed_dim", cfg.embed_dim);
  read_kv("n_tokens", cfg.n_tokens);
  read_kv("hidden_dim", cfg.hidden_dim);
  std::string ratio_str;
  {
    std::string k;
    if (!(f >> k) || k != "select_ratio" || !(f >> ratio_str))
      throw io_error("checkpoint missing select_ratio: " + path);
    ratio.value = detail::parse_double(ratio_str, 0);
  }
  cfg.validate();
  ratio.validate(cfg.n_tokens);
  Checkpoint ck{init_params(cfg, 0), ratio};
  auto read_blocks = [&](ModalityParams& p) {
    detail::for_each_block(p, [&](Vec& v) {
      std::string kw, name;
      std::size_t n = 0;
      if (!(f >> kw >> name >> n) || kw != "block" || n != v.size())
        throw io_error("checkpoint block mismatch near '" + name + "': " +
                       path);
      for (std::size_t i = 0; i < n; ++i) {
        if (!(f >> word)) throw io_error("checkpoint truncated: " + path);
        v[i] = detail::parse_double(word, 0);
      }
    });
  };
  read_blocks(ck.params.image);
  read_blocks(ck.params.text);
  if (!(f >> word) || word != "end")
    throw io_error("checkpoint missing end marker: " + path);
  return ck;
}

}  // namespace rml
