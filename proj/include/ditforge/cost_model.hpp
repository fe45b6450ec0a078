#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "ditforge/error.hpp"
#include "ditforge/model_spec.hpp"

namespace ditforge {

constexpr double kReferenceArea = 256.0 * 256.0;  // pixel area the coefficients refer to
constexpr double kActivationDtypeBytes = 2.0;     // bf16 activations on the wire

struct FlopsRow {
  std::int64_t frames;
  std::int64_t height;
  std::int64_t width;
  double tflops;
};

struct FlopsTable {
  std::vector<FlopsRow> rows;
};

inline FlopsTable flops_table_from_json(const json& j) {
  FlopsTable t;
  for (const auto& row : j) {
    detail::require_fields(row, {"frames", "height", "width", "tflops"}, {}, "FlopsTable row");
    FlopsRow r{row.at("frames").get<std::int64_t>(), row.at("height").get<std::int64_t>(),
               row.at("width").get<std::int64_t>(), row.at("tflops").get<double>()};
    if (r.tflops <= 0) throw ValidationError("FlopsTable: tflops must be positive");
    t.rows.push_back(r);
  }
  // tflops must increase with frames at fixed resolution
  for (const auto& a : t.rows)
    for (const auto& b : t.rows)
      if (a.height == b.height && a.width == b.width && a.frames < b.frames && a.tflops >= b.tflops)
        throw ValidationError("FlopsTable: tflops not increasing with frames at " +
                              std::to_string(a.height) + "x" + std::to_string(a.width));
  return t;
}

inline json flops_table_to_json(const FlopsTable& t) {
  json j = json::array();
  for (const auto& r : t.rows)
    j.push_back({{"frames", r.frames}, {"height", r.height}, {"width", r.width}, {"tflops", r.tflops}});
  return j;
}

// The seven rows published for the production workload.
inline FlopsTable reference_flops_table() {
  FlopsTable t;
  t.rows = {
      {204, 256, 256, 1717.20}, {204, 192, 320, 1592.61}, {136, 256, 256, 1079.85},
      {136, 192, 320, 1004.89}, {68, 256, 256, 509.31},   {68, 192, 320, 475.87},
      {1, 256, 256, 44.99},
  };
  return t;
}

// Per-sample cost F = c + a*(r*f) + b*(r*f)^2 with f = latent frames and
// r = pixel area / 256^2. The quadratic term is the attention cost.
struct CostCoefficients {
  double constant_c = 0;
  double linear_a = 0;
  double quad_b = 0;
  std::int64_t latent_multiplier_k = 0;  // latent frames per 68-frame bucket
  double fit_max_rel_residual = 0;

  LatentTable latent_table_for(const std::vector<std::int64_t>& frame_buckets) const {
    LatentTable t;
    for (auto fr : frame_buckets) t[fr] = latent_frames_for(fr);
    return t;
  }
  std::int64_t latent_frames_for(std::int64_t frames) const {
    return std::max<std::int64_t>(1, latent_multiplier_k * frames / 68);
  }
};

inline double sample_flops(const CostCoefficients& co, const ResolutionBucket& bucket) {
  const double r = static_cast<double>(bucket.height) * bucket.width / kReferenceArea;
  const double rf = r * static_cast<double>(bucket.latent_frames);
  return co.constant_c + co.linear_a * rf + co.quad_b * rf * rf;
}

namespace detail {

// 3x3 linear solve, partial pivoting. Throws on rank deficiency.
inline std::array<double, 3> solve3(std::array<std::array<double, 4>, 3> m) {
  for (int col = 0; col < 3; ++col) {
    int piv = col;
    for (int r = col + 1; r < 3; ++r)
      if (std::fabs(m[r][col]) > std::fabs(m[piv][col])) piv = r;
    std::swap(m[col], m[piv]);
    if (std::fabs(m[col][col]) < 1e-12)
      throw DomainError("calibration error: rank-deficient FLOPs table");
    for (int r = 0; r < 3; ++r) {
      if (r == col) continue;
      double f = m[r][col] / m[col][col];
      for (int c = col; c < 4; ++c) m[r][c] -= f * m[col][c];
    }
  }
  return {m[0][3] / m[0][0], m[1][3] / m[1][1], m[2][3] / m[2][2]};
}

}  // namespace detail

// Least-squares fit of (c, a, b) for every integer latent multiplier k in
// [2, 68]; keeps the k with the smallest maximum relative residual.
inline CostCoefficients calibrate(const FlopsTable& table) {
  if (table.rows.size() < 4) throw DomainError("calibration error: need >= 4 table rows");
  {
    std::vector<std::int64_t> frames;
    for (const auto& r : table.rows) frames.push_back(r.frames);
    std::sort(frames.begin(), frames.end());
    frames.erase(std::unique(frames.begin(), frames.end()), frames.end());
    if (frames.size() < 2) throw DomainError("calibration error: need >= 2 frame buckets");
  }

  std::optional<CostCoefficients> best;
  for (std::int64_t k = 2; k <= 68; ++k) {
    // normal equations for [1, rf, rf^2]
    std::array<std::array<double, 4>, 3> m{};
    for (const auto& row : table.rows) {
      const double f = static_cast<double>(std::max<std::int64_t>(1, k * row.frames / 68));
      const double r = static_cast<double>(row.height) * row.width / kReferenceArea;
      const double rf = r * f;
      const std::array<double, 3> x{1.0, rf, rf * rf};
      for (int i = 0; i < 3; ++i) {
        for (int j2 = 0; j2 < 3; ++j2) m[i][j2] += x[i] * x[j2];
        m[i][3] += x[i] * row.tflops;
      }
    }
    std::array<double, 3> sol;
    try {
      sol = detail::solve3(m);
    } catch (const DomainError&) {
      if (k == 68 && !best) throw;
      continue;
    }
    CostCoefficients co;
    co.constant_c = sol[0];
    co.linear_a = sol[1];
    co.quad_b = sol[2];
    co.latent_multiplier_k = k;
    double max_rel = 0;
    for (const auto& row : table.rows) {
      ResolutionBucket b;
      b.frames = row.frames;
      b.height = row.height;
      b.width = row.width;
      b.latent_frames = co.latent_frames_for(row.frames);
      max_rel = std::max(max_rel, std::fabs(sample_flops(co, b) - row.tflops) / row.tflops);
    }
    co.fit_max_rel_residual = max_rel;
    if (!best || max_rel < best->fit_max_rel_residual) best = co;
  }
  if (!best) throw DomainError("calibration error: no feasible fit");
  return *best;
}

struct MemoryReport {
  double params_gb = 0;
  double grads_gb = 0;
  double optimizer_gb = 0;
  double activations_gb = 0;
  double total_gb = 0;
};

struct MemoryOptions {
  double ckpt_residual = 0.1;       // activation fraction kept at checkpoint boundaries
  std::int64_t samples_per_microbatch = 1;
};

inline MemoryReport memory_breakdown(const ModelSpec& model, const ParallelismConfig& cfg,
                                     const ResolutionBucket& bucket,
                                     double activation_bytes_per_token,
                                     const MemoryOptions& opt = {}) {
  MemoryReport r;
  const double model_shard = static_cast<double>(cfg.tp) * cfg.pp;
  r.params_gb = model.param_count * model.param_bytes / model_shard / 1e9;
  r.grads_gb = model.param_count * model.grad_bytes / model_shard / 1e9;
  r.optimizer_gb =
      model.param_count * model.optimizer_bytes / model_shard / (cfg.zero1 ? cfg.dp : 1) / 1e9;

  const double tokens_per_microbatch =
      static_cast<double>(bucket.tokens()) * opt.samples_per_microbatch;
  // 1F1B keeps up to pp microbatches of activations in flight per stage.
  const double layers_resident = static_cast<double>(model.layers) / cfg.pp *
                                 std::min(cfg.pp, cfg.micro_batches);
  const double seq_shard = (cfg.sp ? static_cast<double>(cfg.tp) : 1.0) * cfg.cp;
  const double ckpt_scale = 1.0 - cfg.ckpt_fraction * (1.0 - opt.ckpt_residual);
  r.activations_gb =
      tokens_per_microbatch * layers_resident * activation_bytes_per_token / seq_shard *
      ckpt_scale / 1e9;
  r.total_gb = r.params_gb + r.grads_gb + r.optimizer_gb + r.activations_gb;
  return r;
}

enum class CollectiveKind { kTpCollective, kCpAll2All, kPpP2p, kDpReduceScatter, kDpAllGather, kVaeHalo };
enum class LinkKind { kIntra, kInter };

inline const char* to_string(CollectiveKind k) {
  switch (k) {
    case CollectiveKind::kTpCollective: return "tp-allgather-reducescatter";
    case CollectiveKind::kCpAll2All: return "cp-all2all";
    case CollectiveKind::kPpP2p: return "pp-p2p";
    case CollectiveKind::kDpReduceScatter: return "dp-reducescatter";
    case CollectiveKind::kDpAllGather: return "dp-allgather";
    case CollectiveKind::kVaeHalo: return "vae-halo";
  }
  return "?";
}

struct CommEntry {
  CollectiveKind kind;
  double bytes = 0;
  LinkKind link = LinkKind::kIntra;
  double time_s = 0;
};

struct CommReport {
  std::vector<CommEntry> entries;

  double bytes_of(CollectiveKind k) const {
    double b = 0;
    for (const auto& e : entries)
      if (e.kind == k) b += e.bytes;
    return b;
  }
  double time_of(CollectiveKind k) const {
    double t = 0;
    for (const auto& e : entries)
      if (e.kind == k) t += e.time_s;
    return t;
  }
};

inline double tp_collective_bytes_per_layer(std::int64_t tp, double activation_bytes_per_layer) {
  if (tp <= 1) return 0;
  return 2.0 * (tp - 1) / tp * activation_bytes_per_layer;
}

struct CommOptions {
  double vae_halo_frames = 0;          // latent frames exchanged per split boundary
  double vae_latent_frame_bytes = 0;
};

// Per-rank, per-iteration communication volumes and link-limited times.
inline CommReport comm_volumes(const ModelSpec& model, const ParallelismConfig& cfg,
                               const ClusterSpec& cluster, const ResolutionBucket& bucket,
                               double microbatch_tokens, const CommOptions& opt = {}) {
  if (cfg.tp > cluster.gpus_per_node)
    throw ValidationError("tp exceeds gpus_per_node; TP collectives must stay intra-node");

  CommReport rep;
  const double intra = cluster.intra_node_bw_gbps * 1e9;
  const double inter = cluster.inter_node_bw_gbps * 1e9;
  const double m = static_cast<double>(cfg.micro_batches);
  const double act_bytes_per_layer = microbatch_tokens * model.hidden_dim * kActivationDtypeBytes;
  const double layers_per_stage = static_cast<double>(model.layers) / cfg.pp;

  auto add = [&rep, intra, inter](CollectiveKind kind, double bytes, LinkKind link) {
    CommEntry e{kind, bytes, link, bytes / (link == LinkKind::kIntra ? intra : inter)};
    rep.entries.push_back(e);
  };

  if (cfg.tp > 1) {
    add(CollectiveKind::kTpCollective,
        tp_collective_bytes_per_layer(cfg.tp, act_bytes_per_layer) * layers_per_stage * m,
        LinkKind::kIntra);
  }
  if (cfg.cp > 1) {
    const double self_attn = act_bytes_per_layer * (cfg.cp - 1) / cfg.cp;
    double cross_attn = self_attn;
    if (cfg.cp_cross_attn_mode == CpAttnMode::kSequenceWise && bucket.tokens() > 0) {
      cross_attn *= static_cast<double>(model.cross_attention_prompt_len) / bucket.tokens();
    }
    add(CollectiveKind::kCpAll2All, (self_attn + cross_attn) * layers_per_stage * m,
        LinkKind::kInter);
  }
  if (cfg.pp > 1) {
    const double boundary = microbatch_tokens * model.hidden_dim * kActivationDtypeBytes;
    add(CollectiveKind::kPpP2p, 2.0 * boundary * m, LinkKind::kInter);  // fwd act + bwd grad
  }
  if (cfg.dp > 1) {
    const double grad_bytes_per_rank =
        model.param_count * model.grad_bytes / (static_cast<double>(cfg.tp) * cfg.pp);
    add(CollectiveKind::kDpReduceScatter, grad_bytes_per_rank * (cfg.dp - 1) / cfg.dp,
        LinkKind::kInter);
    add(CollectiveKind::kDpAllGather, grad_bytes_per_rank * (cfg.dp - 1) / cfg.dp,
        LinkKind::kInter);
  }
  if (opt.vae_halo_frames > 0 && opt.vae_latent_frame_bytes > 0) {
    add(CollectiveKind::kVaeHalo, opt.vae_halo_frames * opt.vae_latent_frame_bytes,
        LinkKind::kIntra);
  }
  return rep;
}

struct VaeHaloReport {
  double halo_bytes = 0;
  double halo_time_s = 0;
  double conv_compute_time_s = 0;
  double ratio = 0;
  std::vector<std::string> assumptions;
};

struct VaeHaloOptions {
  double halo_frames = 1;             // latent frames exchanged per boundary per direction
  double latent_frame_bytes = 4e6;
  double conv_tflops_per_sample = 60;  // modeled VAE conv work per clip
  double kernel_efficiency = 0.55;
  std::int64_t temporal_split = 2;
};

// Halo-exchange cost of a temporally split VAE versus its conv compute.
inline VaeHaloReport vae_halo_report(const ClusterSpec& cluster, const VaeHaloOptions& opt = {}) {
  VaeHaloReport r;
  r.halo_bytes = opt.halo_frames * opt.latent_frame_bytes;
  r.halo_time_s = r.halo_bytes / (cluster.intra_node_bw_gbps * 1e9);
  r.conv_compute_time_s = opt.conv_tflops_per_sample /
                          (cluster.peak_tflops_per_gpu * opt.kernel_efficiency) /
                          static_cast<double>(opt.temporal_split);
  r.ratio = r.halo_time_s / r.conv_compute_time_s;
  r.assumptions = {
      "halo: " + std::to_string(opt.halo_frames) + " latent frame(s) of " +
          std::to_string(static_cast<long long>(opt.latent_frame_bytes)) + " bytes per boundary per direction",
      "conv work: " + std::to_string(opt.conv_tflops_per_sample) + " TFLOPs per clip, split " +
          std::to_string(opt.temporal_split) + "-way temporally",
      "kernel efficiency: " + std::to_string(opt.kernel_efficiency),
      "halo link: intra-node at " + std::to_string(cluster.intra_node_bw_gbps) + " GB/s",
  };
  return r;
}

}  // namespace ditforge
