// SPDX-License-Identifier: Apache-2.0
#include <Eigen/Core>
#include <cmath>

#include "shortlens/error.hpp"
#include "shortlens/vit/vit.hpp"

namespace shortlens::vit {

namespace {

using RowMat =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVec = Eigen::RowVectorXd;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;
using ConstVecMap = Eigen::Map<const RowVec>;
using MutVecMap = Eigen::Map<RowVec>;

constexpr double kLayerNormEps = 1e-6;
constexpr std::size_t kPerBlock = 16;
constexpr std::size_t kFirstBlock = 4;

// Positional indices into ViTModel::layout(); see ViTModel's constructor.
enum BlockSlot : std::size_t {
  kLn1G, kLn1B, kWq, kBq, kWk, kBk, kWv, kBv, kWo, kBo,
  kLn2G, kLn2B, kW1, kB1, kW2, kB2,
};

template <typename Params>
struct Views {
  const std::vector<ParamTensor>* layout;
  Params base;

  auto mat(std::size_t idx) const {
    const auto& t = (*layout)[idx];
    using Map = std::conditional_t<std::is_const_v<std::remove_pointer_t<Params>>,
                                   ConstMap, MutMap>;
    return Map(base + t.offset, static_cast<Eigen::Index>(t.rows),
               static_cast<Eigen::Index>(t.cols));
  }
  auto vec(std::size_t idx) const {
    const auto& t = (*layout)[idx];
    using Map = std::conditional_t<std::is_const_v<std::remove_pointer_t<Params>>,
                                   ConstVecMap, MutVecMap>;
    return Map(base + t.offset, static_cast<Eigen::Index>(t.size()));
  }
  std::size_t block(std::size_t l, BlockSlot s) const {
    return kFirstBlock + l * kPerBlock + s;
  }
  std::size_t final_g(std::size_t blocks) const {
    return kFirstBlock + blocks * kPerBlock;
  }
};

struct LayerNormCache {
  RowMat xhat;
  Eigen::VectorXd rstd;
};

RowMat layer_norm(const RowMat& x, const ConstVecMap& g, const ConstVecMap& b,
                  LayerNormCache& cache) {
  const Eigen::Index rows = x.rows();
  const Eigen::Index cols = x.cols();
  cache.xhat.resize(rows, cols);
  cache.rstd.resize(rows);
  RowMat y(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    const double mean = x.row(r).mean();
    const double var = (x.row(r).array() - mean).square().mean();
    const double rstd = 1.0 / std::sqrt(var + kLayerNormEps);
    cache.rstd(r) = rstd;
    cache.xhat.row(r) = (x.row(r).array() - mean) * rstd;
    y.row(r) = cache.xhat.row(r).cwiseProduct(g) + b;
  }
  return y;
}

// Returns dx; accumulates dgamma/dbeta.
RowMat layer_norm_backward(const RowMat& dy, const LayerNormCache& cache,
                           const ConstVecMap& g, MutVecMap dg, MutVecMap db) {
  const Eigen::Index rows = dy.rows();
  RowMat dx(rows, dy.cols());
  for (Eigen::Index r = 0; r < rows; ++r) {
    dg += dy.row(r).cwiseProduct(cache.xhat.row(r));
    db += dy.row(r);
    const RowVec dxhat = dy.row(r).cwiseProduct(g);
    const double mean_dxhat = dxhat.mean();
    const double mean_dxhat_xhat = dxhat.cwiseProduct(cache.xhat.row(r)).mean();
    dx.row(r) = cache.rstd(r) * (dxhat.array() - mean_dxhat -
                                 cache.xhat.row(r).array() * mean_dxhat_xhat)
                                    .matrix();
  }
  return dx;
}

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * M_SQRT1_2)); }

double gelu_grad(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x * M_SQRT1_2));
  const double pdf = std::exp(-0.5 * x * x) * 0.5 * M_2_SQRTPI * M_SQRT1_2;
  return cdf + x * pdf;
}

struct BlockCache {
  RowMat x_in;
  LayerNormCache ln1;
  RowMat a, q, k, v;
  std::vector<RowMat> attn;  // per head, S x S softmax
  RowMat o;
  RowMat x_mid;
  LayerNormCache ln2;
  RowMat m, h1, g;
};

struct ForwardCache {
  std::vector<BlockCache> blocks;
  RowMat x_final;  // residual stream after the last block
  LayerNormCache final_ln;
  RowMat normed;  // final layer norm of every token
  RowVec logits;
  RowVec probs;
};

RowVec softmax(const RowVec& logits) {
  const double mx = logits.maxCoeff();
  RowVec e = (logits.array() - mx).exp().matrix();
  return e / e.sum();
}

void run_forward(const ViTModel& model, const TokenSequence& tokens,
                 ForwardCache& cache) {
  const ViTConfig& cfg = model.config();
  const std::size_t tcount = tokens.embedded.rows();
  if (tcount == 0) throw InvalidInput("forward_tokens: empty token list");
  if (tcount > cfg.tokens() || tokens.positions.size() != tcount ||
      tokens.embedded.cols() != cfg.embed_dim) {
    throw InvalidInput("forward_tokens: token sequence shape mismatch");
  }
  const Views<const double*> w{&model.layout(), model.params().data()};
  const auto S = static_cast<Eigen::Index>(tcount + 1);
  const auto d = static_cast<Eigen::Index>(cfg.embed_dim);
  const auto dh = static_cast<Eigen::Index>(cfg.head_dim());
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  RowMat x(S, d);
  x.row(0) = w.vec(2) + w.mat(3).row(0);
  x.bottomRows(S - 1) = ConstMap(tokens.embedded.values().data(), S - 1, d);

  cache.blocks.resize(cfg.blocks);
  for (std::size_t l = 0; l < cfg.blocks; ++l) {
    BlockCache& c = cache.blocks[l];
    c.x_in = x;
    c.a = layer_norm(x, w.vec(w.block(l, kLn1G)), w.vec(w.block(l, kLn1B)),
                     c.ln1);
    c.q = (c.a * w.mat(w.block(l, kWq))).rowwise() + w.vec(w.block(l, kBq));
    c.k = (c.a * w.mat(w.block(l, kWk))).rowwise() + w.vec(w.block(l, kBk));
    c.v = (c.a * w.mat(w.block(l, kWv))).rowwise() + w.vec(w.block(l, kBv));
    c.o.resize(S, d);
    c.attn.resize(cfg.heads);
    for (std::size_t h = 0; h < cfg.heads; ++h) {
      const auto col = static_cast<Eigen::Index>(h) * dh;
      RowMat scores =
          (c.q.middleCols(col, dh) * c.k.middleCols(col, dh).transpose()) *
          scale;
      for (Eigen::Index r = 0; r < S; ++r) {
        const double mx = scores.row(r).maxCoeff();
        scores.row(r) = (scores.row(r).array() - mx).exp().matrix();
        scores.row(r) /= scores.row(r).sum();
      }
      c.o.middleCols(col, dh) = scores * c.v.middleCols(col, dh);
      c.attn[h] = std::move(scores);
    }
    c.x_mid =
        x + ((c.o * w.mat(w.block(l, kWo))).rowwise() + w.vec(w.block(l, kBo)));
    c.m = layer_norm(c.x_mid, w.vec(w.block(l, kLn2G)),
                     w.vec(w.block(l, kLn2B)), c.ln2);
    c.h1 = (c.m * w.mat(w.block(l, kW1))).rowwise() + w.vec(w.block(l, kB1));
    c.g = c.h1.unaryExpr(&gelu);
    x = c.x_mid +
        ((c.g * w.mat(w.block(l, kW2))).rowwise() + w.vec(w.block(l, kB2)));
  }
  cache.x_final = x;
  const std::size_t fg = w.final_g(cfg.blocks);
  cache.normed = layer_norm(x, w.vec(fg), w.vec(fg + 1), cache.final_ln);
  cache.logits = cache.normed.row(0) * w.mat(fg + 2) + w.vec(fg + 3);
  cache.probs = softmax(cache.logits);
}

double backward(const ViTModel& model, const TokenSequence& tokens,
                const Matrix& patches, const ForwardCache& cache, int label,
                std::span<double> grad) {
  const ViTConfig& cfg = model.config();
  const Views<const double*> w{&model.layout(), model.params().data()};
  const Views<double*> gw{&model.layout(), grad.data()};
  const auto S = static_cast<Eigen::Index>(tokens.positions.size() + 1);
  const auto d = static_cast<Eigen::Index>(cfg.embed_dim);
  const auto dh = static_cast<Eigen::Index>(cfg.head_dim());
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  const double loss = -std::log(cache.probs(label));
  RowVec dlogits = cache.probs;
  dlogits(label) -= 1.0;

  const std::size_t fg = w.final_g(cfg.blocks);
  gw.mat(fg + 2) += cache.normed.row(0).transpose() * dlogits;
  gw.vec(fg + 3) += dlogits;
  RowMat dnormed = RowMat::Zero(S, d);
  dnormed.row(0) = dlogits * w.mat(fg + 2).transpose();
  RowMat dx = layer_norm_backward(dnormed, cache.final_ln, w.vec(fg),
                                  gw.vec(fg), gw.vec(fg + 1));

  for (std::size_t li = cfg.blocks; li-- > 0;) {
    const BlockCache& c = cache.blocks[li];
    // MLP branch
    gw.mat(w.block(li, kW2)) += c.g.transpose() * dx;
    gw.vec(w.block(li, kB2)) += dx.colwise().sum();
    RowMat dh1 = dx * w.mat(w.block(li, kW2)).transpose();
    dh1.array() *= c.h1.unaryExpr(&gelu_grad).array();
    gw.mat(w.block(li, kW1)) += c.m.transpose() * dh1;
    gw.vec(w.block(li, kB1)) += dh1.colwise().sum();
    const RowMat dm = dh1 * w.mat(w.block(li, kW1)).transpose();
    RowMat dx_mid = dx + layer_norm_backward(dm, c.ln2, w.vec(w.block(li, kLn2G)),
                                             gw.vec(w.block(li, kLn2G)),
                                             gw.vec(w.block(li, kLn2B)));
    // attention branch
    gw.mat(w.block(li, kWo)) += c.o.transpose() * dx_mid;
    gw.vec(w.block(li, kBo)) += dx_mid.colwise().sum();
    const RowMat dout = dx_mid * w.mat(w.block(li, kWo)).transpose();
    RowMat dq(S, d), dk(S, d), dv(S, d);
    for (std::size_t h = 0; h < cfg.heads; ++h) {
      const auto col = static_cast<Eigen::Index>(h) * dh;
      const RowMat& P = c.attn[h];
      const auto do_h = dout.middleCols(col, dh);
      dv.middleCols(col, dh) = P.transpose() * do_h;
      RowMat dP = do_h * c.v.middleCols(col, dh).transpose();
      for (Eigen::Index r = 0; r < S; ++r) {
        const double dot = dP.row(r).dot(P.row(r));
        dP.row(r) = P.row(r).cwiseProduct((dP.row(r).array() - dot).matrix());
      }
      dq.middleCols(col, dh) = dP * c.k.middleCols(col, dh) * scale;
      dk.middleCols(col, dh) = dP.transpose() * c.q.middleCols(col, dh) * scale;
    }
    gw.mat(w.block(li, kWq)) += c.a.transpose() * dq;
    gw.vec(w.block(li, kBq)) += dq.colwise().sum();
    gw.mat(w.block(li, kWk)) += c.a.transpose() * dk;
    gw.vec(w.block(li, kBk)) += dk.colwise().sum();
    gw.mat(w.block(li, kWv)) += c.a.transpose() * dv;
    gw.vec(w.block(li, kBv)) += dv.colwise().sum();
    const RowMat da = dq * w.mat(w.block(li, kWq)).transpose() +
                      dk * w.mat(w.block(li, kWk)).transpose() +
                      dv * w.mat(w.block(li, kWv)).transpose();
    dx = dx_mid + layer_norm_backward(da, c.ln1, w.vec(w.block(li, kLn1G)),
                                      gw.vec(w.block(li, kLn1G)),
                                      gw.vec(w.block(li, kLn1B)));
  }

  // embedding
  gw.vec(2) += dx.row(0);
  auto dpos = gw.mat(3);
  dpos.row(0) += dx.row(0);
  const auto pd = static_cast<Eigen::Index>(cfg.patch_dim());
  auto dWp = gw.mat(0);
  auto dbp = gw.vec(1);
  for (Eigen::Index i = 1; i < S; ++i) {
    const auto pos = static_cast<Eigen::Index>(tokens.positions[i - 1]);
    dpos.row(pos + 1) += dx.row(i);
    dbp += dx.row(i);
    const ConstVecMap patch(patches.row(static_cast<std::size_t>(pos)).data(),
                            pd);
    dWp += patch.transpose() * dx.row(i);
  }
  return loss;
}

std::vector<double> to_vector(const RowVec& v) {
  return std::vector<double>(v.data(), v.data() + v.size());
}

}  // namespace

Matrix extract_patches(const ViTConfig& cfg, const Image& image) {
  if (image.size != cfg.image_size || image.channels != cfg.channels ||
      image.pixels.size() != image.size * image.size * image.channels) {
    throw InvalidInput("image " + std::to_string(image.size) + "px x " +
                       std::to_string(image.channels) +
                       "ch does not match model input " +
                       std::to_string(cfg.image_size) + "px x " +
                       std::to_string(cfg.channels) + "ch");
  }
  const std::size_t grid = cfg.grid();
  const std::size_t p = cfg.patch_size;
  const std::size_t ch = cfg.channels;
  Matrix patches(cfg.tokens(), cfg.patch_dim());
  const double inv_std = 1.0 / cfg.input_std;
  for (std::size_t gy = 0; gy < grid; ++gy) {
    for (std::size_t gx = 0; gx < grid; ++gx) {
      auto row = patches.row(gy * grid + gx);
      for (std::size_t py = 0; py < p; ++py) {
        for (std::size_t px = 0; px < p; ++px) {
          for (std::size_t c = 0; c < ch; ++c) {
            row[(py * p + px) * ch + c] =
                (static_cast<double>(image.at(gy * p + py, gx * p + px, c)) -
                 cfg.input_mean) *
                inv_std;
          }
        }
      }
    }
  }
  return patches;
}

namespace {

TokenSequence embed_patches(const ViTModel& model, const Matrix& patches) {
  const ViTConfig& cfg = model.config();
  const Views<const double*> w{&model.layout(), model.params().data()};
  const auto T = static_cast<Eigen::Index>(cfg.tokens());
  const auto d = static_cast<Eigen::Index>(cfg.embed_dim);
  TokenSequence out;
  out.embedded = Matrix(cfg.tokens(), cfg.embed_dim);
  MutMap e(out.embedded.values().data(), T, d);
  e = ConstMap(patches.values().data(), T,
               static_cast<Eigen::Index>(cfg.patch_dim())) *
      w.mat(0);
  e.rowwise() += w.vec(1);
  e += w.mat(3).bottomRows(T);
  out.positions.resize(cfg.tokens());
  for (std::size_t i = 0; i < cfg.tokens(); ++i) {
    out.positions[i] = static_cast<std::uint32_t>(i);
  }
  return out;
}

}  // namespace

TokenSequence embed(const ViTModel& model, const Image& image) {
  return embed_patches(model, extract_patches(model.config(), image));
}

TokenSequence drop_tokens(const TokenSequence& tokens,
                          std::span<const bool> drop) {
  if (drop.size() != tokens.positions.size()) {
    throw InvalidInput("drop mask length != token count");
  }
  TokenSequence out;
  for (std::size_t i = 0; i < drop.size(); ++i) {
    if (drop[i]) continue;
    out.embedded.push_row(tokens.embedded.row(i));
    out.positions.push_back(tokens.positions[i]);
  }
  if (out.positions.empty()) {
    throw InvalidInput("drop mask removes every token");
  }
  return out;
}

Prediction forward_tokens(const ViTModel& model, const TokenSequence& tokens) {
  ForwardCache cache;
  run_forward(model, tokens, cache);
  return {to_vector(cache.logits), to_vector(cache.probs),
          to_vector(cache.normed.row(0))};
}

ActivationRecord forward_record(const ViTModel& model,
                                const TokenSequence& tokens,
                                std::uint64_t image_id) {
  const ViTConfig& cfg = model.config();
  ForwardCache cache;
  run_forward(model, tokens, cache);
  const std::size_t tcount = tokens.positions.size();
  const std::size_t d = cfg.embed_dim;
  const std::size_t dh = cfg.head_dim();

  ActivationRecord rec;
  rec.image_id = image_id;
  rec.token_embeddings = Matrix(tcount, d);
  for (std::size_t t = 0; t < tcount; ++t) {
    for (std::size_t j = 0; j < d; ++j) {
      rec.token_embeddings(t, j) =
          cache.normed(static_cast<Eigen::Index>(t + 1),
                       static_cast<Eigen::Index>(j));
    }
  }
  rec.cls_embedding = to_vector(cache.normed.row(0));
  const RowMat& keys = cache.blocks.back().k;
  rec.per_head_keys.assign(cfg.heads, Matrix(tcount, dh));
  for (std::size_t h = 0; h < cfg.heads; ++h) {
    for (std::size_t t = 0; t < tcount; ++t) {
      for (std::size_t j = 0; j < dh; ++j) {
        rec.per_head_keys[h](t, j) =
            keys(static_cast<Eigen::Index>(t + 1),
                 static_cast<Eigen::Index>(h * dh + j));
      }
    }
  }
  rec.logits = to_vector(cache.logits);
  rec.probs = to_vector(cache.probs);
  rec.token_positions = tokens.positions;
  return rec;
}

ActivationRecord forward(const ViTModel& model, const Image& image,
                         std::uint64_t image_id) {
  return forward_record(model, embed(model, image), image_id);
}

std::vector<ActivationRecord> export_activations(
    const ViTModel& model, std::span<const Image> images,
    std::span<const std::uint64_t> image_ids) {
  if (images.size() != image_ids.size()) {
    throw InvalidInput("export_activations: image/id count mismatch");
  }
  std::vector<ActivationRecord> out;
  out.reserve(images.size());
  for (std::size_t i = 0; i < images.size(); ++i) {
    out.push_back(forward(model, images[i], image_ids[i]));
  }
  return out;
}

double loss_and_gradient(const ViTModel& model, const Image& image, int label,
                         std::span<double> grad, std::span<const bool> drop) {
  if (grad.size() != model.params().size()) {
    throw InvalidInput("gradient buffer does not match parameter count");
  }
  if (label < 0 || static_cast<std::size_t>(label) >= model.config().classes) {
    throw InvalidInput("label out of range");
  }
  const Matrix patches = extract_patches(model.config(), image);
  TokenSequence tokens = embed_patches(model, patches);
  if (!drop.empty()) tokens = drop_tokens(tokens, drop);
  thread_local ForwardCache cache;
  run_forward(model, tokens, cache);
  // Gradients accumulate in an aligned buffer, then into `grad`.
  thread_local Eigen::VectorXd scratch;
  scratch.setZero(static_cast<Eigen::Index>(grad.size()));
  const double l = backward(model, tokens, patches, cache, label,
                            {scratch.data(), grad.size()});
  for (std::size_t i = 0; i < grad.size(); ++i) grad[i] += scratch[static_cast<Eigen::Index>(i)];
  return l;
}

double loss(const ViTModel& model, const Image& image, int label,
            std::span<const bool> drop) {
  TokenSequence tokens = embed(model, image);
  if (!drop.empty()) tokens = drop_tokens(tokens, drop);
  const Prediction p = forward_tokens(model, tokens);
  return -std::log(p.probs.at(static_cast<std::size_t>(label)));
}

}  // namespace shortlens::vit
