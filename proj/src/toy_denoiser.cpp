#include "semantix/toy_denoiser.hpp"

#include "semantix/rng.hpp"

#include <algorithm>
#include <cmath>
#include <mutex>
#include <stdexcept>
#include <unordered_map>

namespace semantix {

namespace {

constexpr std::uint64_t kEpsTag = 0x01;
constexpr std::uint64_t kBiasTag = 0x02;
constexpr std::uint64_t kBlockTag = 0x03;
constexpr std::uint64_t kAttnTag = 0x04;
constexpr std::uint64_t kEmbedTag = 0x05;

Matrix seeded_matrix(std::uint64_t seed, int rows, int cols, Real scale) {
  NormalSampler rng(seed);
  Matrix m(rows, cols);
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) m(r, c) = rng.next() * scale;
  return m;
}

void softmax_rows_inplace(Matrix& m) {
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    Real mx = m.row(r).maxCoeff();
    m.row(r) = (m.row(r).array() - mx).exp();
    m.row(r) /= m.row(r).sum();
  }
}

/// Row-wise softmax pullback: given s = softmax(l) and ds, returns
/// dl = (ds - (ds . s)) * s per row.
Matrix softmax_rows_vjp(const Matrix& s, const Matrix& s_bar) {
  Matrix l_bar(s.rows(), s.cols());
  for (Eigen::Index r = 0; r < s.rows(); ++r) {
    Real dot = s.row(r).dot(s_bar.row(r));
    l_bar.row(r) = (s_bar.row(r).array() - dot) * s.row(r).array();
  }
  return l_bar;
}

std::uint64_t condition_hash(const Condition& c) {
  return c.is_null ? fnv1a64("<null-token>") : fnv1a64(c.prompt);
}

}  // namespace

std::vector<FeatureBlockInfo> ToyDenoiserOptions::default_blocks() {
  // decoder-style ordering: block 1 deepest (coarsest), block 4 full size
  return {{1, 16, 8}, {2, 12, 4}, {3, 10, 2}, {4, 8, 1}};
}

std::vector<AttnLayerInfo> ToyDenoiserOptions::default_layers() {
  return {{1, 8, 2, 8, 6}, {2, 4, 2, 8, 6}, {3, 2, 2, 8, 6}, {4, 1, 2, 8, 6}};
}

ToyDenoiser::ToyDenoiser(ToyDenoiserOptions options) : options_(std::move(options)) {
  if (options_.blocks.empty()) options_.blocks = ToyDenoiserOptions::default_blocks();
  if (options_.layers.empty()) options_.layers = ToyDenoiserOptions::default_layers();
  if (options_.in_channels < 1) throw std::invalid_argument("ToyDenoiser: in_channels < 1");
  if (options_.patch < 1) throw std::invalid_argument("ToyDenoiser: patch < 1");

  const int m = options_.in_channels * options_.patch * options_.patch;
  const Real proj_scale = 1.0 / std::sqrt(Real(m));
  for (const auto& blk : options_.blocks) {
    block_proj_[blk.id] =
        seeded_matrix(mix_seed(options_.seed, kBlockTag, std::uint64_t(blk.id)), blk.channels, m,
                      proj_scale);
  }
  for (const auto& lay : options_.layers) {
    LayerWeights w;
    for (int h = 0; h < lay.heads; ++h) {
      std::uint64_t base = mix_seed(options_.seed, kAttnTag, std::uint64_t(lay.id), std::uint64_t(h));
      w.wq.push_back(seeded_matrix(mix_seed(base, 1), m, lay.d_head, proj_scale));
      w.wk.push_back(seeded_matrix(mix_seed(base, 2), m, lay.d_head, proj_scale));
      w.wv.push_back(seeded_matrix(mix_seed(base, 3), m, lay.d_head, proj_scale));
      w.wcross.push_back(seeded_matrix(mix_seed(base, 4), lay.d_head, lay.d_head,
                                       1.0 / std::sqrt(Real(lay.d_head))));
    }
    layer_weights_[lay.id] = std::move(w);
  }
}

const Matrix& ToyDenoiser::block_projection(int block_id) const {
  auto it = block_proj_.find(block_id);
  if (it == block_proj_.end())
    throw std::invalid_argument("ToyDenoiser: unknown feature block id " +
                                std::to_string(block_id));
  return it->second;
}

FeatureBlockInfo DenoiserBackend::feature_block(int id) const {
  for (const auto& b : feature_blocks())
    if (b.id == id) return b;
  throw std::invalid_argument("unknown feature block id " + std::to_string(id));
}

AttnLayerInfo DenoiserBackend::attn_layer(int id) const {
  for (const auto& l : attn_layers())
    if (l.id == id) return l;
  throw std::invalid_argument("unknown attention layer id " + std::to_string(id));
}

Matrix ToyDenoiser::patch_matrix(const Tensor& x, int b, int downsample) const {
  const int H = x.height(), W = x.width(), C = x.channels(), p = options_.patch;
  if (H % downsample != 0 || W % downsample != 0)
    throw std::invalid_argument("ToyDenoiser: latent " + std::to_string(H) + "x" +
                                std::to_string(W) + " not divisible by tap downsample " +
                                std::to_string(downsample));
  const int hh = H / downsample, ww = W / downsample;
  Matrix phi(static_cast<Eigen::Index>(hh) * ww, static_cast<Eigen::Index>(C) * p * p);
  for (int r = 0; r < hh; ++r) {
    for (int c = 0; c < ww; ++c) {
      Eigen::Index row = static_cast<Eigen::Index>(r) * ww + c;
      Eigen::Index col = 0;
      for (int ch = 0; ch < C; ++ch)
        for (int u = 0; u < p; ++u)
          for (int v = 0; v < p; ++v)
            phi(row, col++) = x.at_wrapped(b, ch, r * downsample + u, c * downsample + v);
    }
  }
  return phi;
}

void ToyDenoiser::scatter_patch_grad(Tensor& grad, int b, int downsample,
                                     const Matrix& phi_bar) const {
  const int H = grad.height(), W = grad.width(), C = grad.channels(), p = options_.patch;
  const int hh = H / downsample, ww = W / downsample;
  for (int r = 0; r < hh; ++r) {
    for (int c = 0; c < ww; ++c) {
      Eigen::Index row = static_cast<Eigen::Index>(r) * ww + c;
      Eigen::Index col = 0;
      for (int ch = 0; ch < C; ++ch)
        for (int u = 0; u < p; ++u)
          for (int v = 0; v < p; ++v) {
            int y = (r * downsample + u) % H;
            int xx = (c * downsample + v) % W;
            grad.at(b, ch, y, xx) += phi_bar(row, col++);
          }
    }
  }
}

Matrix ToyDenoiser::prompt_embedding(const Condition& c, int layer_id, int head) const {
  const AttnLayerInfo info = attn_layer(layer_id);
  return seeded_matrix(mix_seed(options_.seed, kEmbedTag, condition_hash(c),
                                std::uint64_t(layer_id), std::uint64_t(head)),
                       info.tokens, info.d_head, 1.0);
}

ToyDenoiser::LayerState ToyDenoiser::layer_forward(const Tensor& x, int b,
                                                   const AttnLayerInfo& info, const Condition& c,
                                                   const KVInjection* injection) const {
  const LayerWeights& w = layer_weights_.at(info.id);
  LayerState st;
  st.phi = patch_matrix(x, b, info.downsample);
  const Real inv_sqrt_d = 1.0 / std::sqrt(Real(info.d_head));

  bool inject_here = false;
  if (injection != nullptr &&
      std::find(injection->layer_ids.begin(), injection->layer_ids.end(), info.id) !=
          injection->layer_ids.end()) {
    inject_here = true;
  }

  for (int h = 0; h < info.heads; ++h) {
    st.q.push_back(st.phi * w.wq[h]);
    if (inject_here) {
      const auto& kk = injection->keys.at(info.id);
      const auto& vv = injection->values.at(info.id);
      if (b >= static_cast<int>(kk.size()))
        throw std::invalid_argument("KVInjection: missing batch entry " + std::to_string(b) +
                                    " for layer " + std::to_string(info.id));
      const Matrix& K = kk[static_cast<size_t>(b)][static_cast<size_t>(h)];
      const Matrix& V = vv[static_cast<size_t>(b)][static_cast<size_t>(h)];
      // K/V may carry a different position count than the queries (reference
      // and output grids need not agree); head dims must match exactly
      if (K.cols() != info.d_head || V.rows() != K.rows() || V.cols() != info.d_head ||
          K.rows() < 1)
        throw std::invalid_argument("KVInjection: key/value shape mismatch at layer " +
                                    std::to_string(info.id));
      st.k.push_back(K);
      st.v.push_back(V);
    } else {
      st.k.push_back(st.phi * w.wk[h]);
      st.v.push_back(st.phi * w.wv[h]);
    }
    Matrix logits = st.q[h] * st.k[h].transpose() * inv_sqrt_d;
    softmax_rows_inplace(logits);
    st.attn.push_back(logits);
    st.out.push_back(st.attn[h] * st.v[h]);

    st.cross_q.push_back(st.out[h] * w.wcross[h]);
    Matrix embed = prompt_embedding(c, info.id, h);
    Matrix clogits = st.cross_q[h] * embed.transpose() * inv_sqrt_d;
    softmax_rows_inplace(clogits);
    st.cross.push_back(clogits);
  }
  st.injected = inject_here;
  return st;
}

void ToyDenoiser::add_eps(const Tensor& x, int t, const Condition& c, Tensor& out) const {
  const int H = x.height(), W = x.width();
  for (int b = 0; b < x.batch(); ++b) {
    for (int ch = 0; ch < x.channels(); ++ch) {
      NormalSampler krng(mix_seed(options_.seed, kEpsTag, std::uint64_t(t), std::uint64_t(ch)));
      Real kern[9];
      for (auto& kv : kern) kv = krng.next() * 0.12;
      NormalSampler brng(mix_seed(options_.seed, kBiasTag, condition_hash(c), std::uint64_t(t),
                                  std::uint64_t(ch)));
      for (int y = 0; y < H; ++y) {
        for (int xx = 0; xx < W; ++xx) {
          Real acc = 0.0;
          for (int u = -1; u <= 1; ++u)
            for (int v = -1; v <= 1; ++v)
              acc += kern[(u + 1) * 3 + (v + 1)] * x.at_wrapped(b, ch, y + u, xx + v);
          out.at(b, ch, y, xx) = acc + 0.2 * brng.next();
        }
      }
    }
  }
}

void ToyDenoiser::eps_vjp(const Tensor& cotangent, int t, Tensor& grad) const {
  const int H = cotangent.height(), W = cotangent.width();
  for (int b = 0; b < cotangent.batch(); ++b) {
    for (int ch = 0; ch < cotangent.channels(); ++ch) {
      NormalSampler krng(mix_seed(options_.seed, kEpsTag, std::uint64_t(t), std::uint64_t(ch)));
      Real kern[9];
      for (auto& kv : kern) kv = krng.next() * 0.12;
      // transpose of circular convolution = correlation with the kernel
      for (int y = 0; y < H; ++y)
        for (int xx = 0; xx < W; ++xx) {
          Real g = cotangent.at(b, ch, y, xx);
          if (g == 0.0) continue;
          for (int u = -1; u <= 1; ++u)
            for (int v = -1; v <= 1; ++v) {
              int yy = ((y + u) % H + H) % H;
              int xv = ((xx + v) % W + W) % W;
              grad.at(b, ch, yy, xv) += kern[(u + 1) * 3 + (v + 1)] * g;
            }
        }
    }
  }
}

DenoiserOutput ToyDenoiser::predict(const Tensor& x, int t, const Condition& c,
                                    const TapRequest& taps, const KVInjection* injection) const {
  if (!all_finite(x)) throw std::invalid_argument("predict: non-finite latent");
  DenoiserOutput out;
  out.eps_cond = Tensor(x.batch(), x.channels(), x.height(), x.width());
  out.eps_uncond = Tensor(x.batch(), x.channels(), x.height(), x.width());
  add_eps(x, t, c.is_null ? Condition::null_token() : c, out.eps_cond);
  add_eps(x, t, Condition::null_token(), out.eps_uncond);

  for (int id : taps.feature_blocks) {
    const FeatureBlockInfo blk = feature_block(id);
    const Matrix& proj = block_projection(id);
    const int hh = x.height() / blk.downsample, ww = x.width() / blk.downsample;
    Tensor F(x.batch(), blk.channels, hh, ww);
    for (int b = 0; b < x.batch(); ++b) {
      Matrix feats = patch_matrix(x, b, blk.downsample) * proj.transpose();  // n x channels
      position_view(F, b) = feats;
    }
    out.features[id] = std::move(F);
  }

  std::vector<int> attn_ids = taps.self_attn_layers;
  for (int id : taps.cross_attn_layers)
    if (std::find(attn_ids.begin(), attn_ids.end(), id) == attn_ids.end()) attn_ids.push_back(id);

  for (int id : attn_ids) {
    const AttnLayerInfo info = attn_layer(id);
    BatchHeadMats self_b, cross_b;
    for (int b = 0; b < x.batch(); ++b) {
      LayerState st = layer_forward(x, b, info, c, injection);
      self_b.push_back(std::move(st.attn));
      cross_b.push_back(std::move(st.cross));
    }
    bool want_self = std::find(taps.self_attn_layers.begin(), taps.self_attn_layers.end(), id) !=
                     taps.self_attn_layers.end();
    bool want_cross = std::find(taps.cross_attn_layers.begin(), taps.cross_attn_layers.end(),
                                id) != taps.cross_attn_layers.end();
    if (want_self) out.self_attn[id] = std::move(self_b);
    if (want_cross) out.cross_attn[id] = std::move(cross_b);
  }
  return out;
}

KVInjection ToyDenoiser::capture_kv(const Tensor& x, int t, const Condition& c,
                                    const std::vector<int>& layer_ids) const {
  (void)t;
  KVInjection inj;
  inj.layer_ids = layer_ids;
  for (int id : layer_ids) {
    const AttnLayerInfo info = attn_layer(id);
    const LayerWeights& w = layer_weights_.at(id);
    BatchHeadMats keys_b, values_b;
    for (int b = 0; b < x.batch(); ++b) {
      Matrix phi = patch_matrix(x, b, info.downsample);
      HeadMats ks, vs;
      for (int h = 0; h < info.heads; ++h) {
        ks.push_back(phi * w.wk[h]);
        vs.push_back(phi * w.wv[h]);
      }
      keys_b.push_back(std::move(ks));
      values_b.push_back(std::move(vs));
    }
    inj.keys[id] = std::move(keys_b);
    inj.values[id] = std::move(values_b);
  }
  (void)c;
  return inj;
}

Tensor ToyDenoiser::vjp(const Tensor& x, int t, const Condition& c, const TapCotangents& cot,
                        const KVInjection* injection) const {
  Tensor grad(x.batch(), x.channels(), x.height(), x.width());
  if (!cot.any()) return grad;

  if (cot.eps_cond) eps_vjp(*cot.eps_cond, t, grad);
  if (cot.eps_uncond) eps_vjp(*cot.eps_uncond, t, grad);

  for (const auto& [id, fbar] : cot.features) {
    const FeatureBlockInfo blk = feature_block(id);
    const Matrix& proj = block_projection(id);
    for (int b = 0; b < x.batch(); ++b) {
      Matrix phi_bar = position_view(fbar, b) * proj;  // (n x c)(c x m)
      scatter_patch_grad(grad, b, blk.downsample, phi_bar);
    }
  }

  // union of layers touched by self- and cross-attention cotangents
  std::vector<int> attn_ids;
  for (const auto& [id, unused] : cot.self_attn) attn_ids.push_back(id);
  for (const auto& [id, unused] : cot.cross_attn)
    if (std::find(attn_ids.begin(), attn_ids.end(), id) == attn_ids.end()) attn_ids.push_back(id);

  for (int id : attn_ids) {
    const AttnLayerInfo info = attn_layer(id);
    const LayerWeights& w = layer_weights_.at(id);
    const Real inv_sqrt_d = 1.0 / std::sqrt(Real(info.d_head));
    auto self_it = cot.self_attn.find(id);
    auto cross_it = cot.cross_attn.find(id);

    for (int b = 0; b < x.batch(); ++b) {
      LayerState st = layer_forward(x, b, info, c, injection);
      Matrix phi_bar = Matrix::Zero(st.phi.rows(), st.phi.cols());

      for (int h = 0; h < info.heads; ++h) {
        Matrix out_bar = Matrix::Zero(st.out[h].rows(), st.out[h].cols());

        if (cross_it != cot.cross_attn.end()) {
          const Matrix& ca_bar = cross_it->second[static_cast<size_t>(b)][static_cast<size_t>(h)];
          if (ca_bar.rows() != st.cross[h].rows() || ca_bar.cols() != st.cross[h].cols())
            throw std::invalid_argument("vjp: cross-attn cotangent shape mismatch at layer " +
                                        std::to_string(id));
          Matrix clog_bar = softmax_rows_vjp(st.cross[h], ca_bar);
          Matrix embed = prompt_embedding(c, id, h);
          Matrix cq_bar = clog_bar * embed * inv_sqrt_d;
          out_bar += cq_bar * w.wcross[h].transpose();
        }

        Matrix attn_bar = Matrix::Zero(st.attn[h].rows(), st.attn[h].cols());
        if (self_it != cot.self_attn.end()) {
          const Matrix& sa_bar = self_it->second[static_cast<size_t>(b)][static_cast<size_t>(h)];
          if (sa_bar.rows() != st.attn[h].rows() || sa_bar.cols() != st.attn[h].cols())
            throw std::invalid_argument("vjp: self-attn cotangent shape mismatch at layer " +
                                        std::to_string(id));
          attn_bar += sa_bar;
        }
        attn_bar += out_bar * st.v[h].transpose();

        Matrix logit_bar = softmax_rows_vjp(st.attn[h], attn_bar);
        Matrix q_bar = logit_bar * st.k[h] * inv_sqrt_d;
        phi_bar += q_bar * w.wq[h].transpose();
        if (!st.injected) {
          Matrix k_bar = logit_bar.transpose() * st.q[h] * inv_sqrt_d;
          Matrix v_bar = st.attn[h].transpose() * out_bar;
          phi_bar += k_bar * w.wk[h].transpose() + v_bar * w.wv[h].transpose();
        }
      }
      scatter_patch_grad(grad, b, info.downsample, phi_bar);
    }
  }
  return grad;
}

Tensor ToyDenoiser::encode(const Tensor& image) const {
  const int k = options_.latent_downscale;
  if (k <= 1) return image;
  if (image.height() % k != 0 || image.width() % k != 0)
    throw std::invalid_argument("encode: image dims not divisible by latent downscale " +
                                std::to_string(k));
  Tensor lat(image.batch(), image.channels(), image.height() / k, image.width() / k);
  for (int b = 0; b < image.batch(); ++b)
    for (int c = 0; c < image.channels(); ++c)
      for (int y = 0; y < lat.height(); ++y)
        for (int x = 0; x < lat.width(); ++x) {
          Real acc = 0.0;
          for (int u = 0; u < k; ++u)
            for (int v = 0; v < k; ++v) acc += image.at(b, c, y * k + u, x * k + v);
          lat.at(b, c, y, x) = acc / (k * k);
        }
  return lat;
}

Tensor ToyDenoiser::decode(const Tensor& latent) const {
  const int k = options_.latent_downscale;
  if (k <= 1) return latent;
  Tensor img(latent.batch(), latent.channels(), latent.height() * k, latent.width() * k);
  for (int b = 0; b < latent.batch(); ++b)
    for (int c = 0; c < latent.channels(); ++c)
      for (int y = 0; y < img.height(); ++y)
        for (int x = 0; x < img.width(); ++x)
          img.at(b, c, y, x) = latent.at(b, c, y / k, x / k);
  return img;
}

namespace {

std::unordered_map<std::string, BackendFactory>& backend_registry() {
  static std::unordered_map<std::string, BackendFactory> reg;
  return reg;
}

std::mutex& registry_mutex() {
  static std::mutex m;
  return m;
}

}  // namespace

void register_backend(const std::string& name, BackendFactory factory) {
  std::lock_guard<std::mutex> lock(registry_mutex());
  backend_registry()[name] = std::move(factory);
}

bool backend_registered(const std::string& name) {
  std::lock_guard<std::mutex> lock(registry_mutex());
  return backend_registry().count(name) > 0;
}

std::unique_ptr<DenoiserBackend> make_registered_backend(const std::string& name,
                                                         const BackendOptions& options) {
  std::lock_guard<std::mutex> lock(registry_mutex());
  auto it = backend_registry().find(name);
  if (it == backend_registry().end()) {
    std::string known;
    for (const auto& [k, unused] : backend_registry()) known += (known.empty() ? "" : ", ") + k;
    throw std::invalid_argument("no denoiser backend registered under '" + name +
                                "' (registered: " + (known.empty() ? "<none>" : known) + ")");
  }
  return it->second(options);
}

std::vector<std::string> registered_backend_names() {
  std::lock_guard<std::mutex> lock(registry_mutex());
  std::vector<std::string> names;
  for (const auto& [k, unused] : backend_registry()) names.push_back(k);
  std::sort(names.begin(), names.end());
  return names;
}

void ensure_toy_backend_registered() {
  static std::once_flag flag;
  std::call_once(flag, [] {
    register_backend("toy", [](const BackendOptions& opt) {
      ToyDenoiserOptions topt;
      topt.seed = opt.seed;
      topt.latent_downscale = opt.latent_downscale;
      return std::make_unique<ToyDenoiser>(topt);
    });
  });
}

}  // namespace semantix
