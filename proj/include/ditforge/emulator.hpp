#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "ditforge/cost_model.hpp"
#include "ditforge/error.hpp"
#include "ditforge/model_spec.hpp"

namespace ditforge {

struct PipelineTiming {
  double makespan_s = 0;
  double bubble_fraction = 0;
};

// Event-driven simulation of the interleaved one-forward-one-backward
// schedule. Interleaving is modeled by splitting every microbatch into vpp
// chunks of 1/vpp the stage time; each stage executes its static 1F1B order
// (warmup forwards, steady-state F/B alternation, drain backwards) and start
// times follow from dependencies plus stage serialization.
inline PipelineTiming simulate_pipeline(std::int64_t pp, std::int64_t vpp,
                                        std::int64_t micro_batches, double stage_fwd_s,
                                        double stage_bwd_s) {
  if (pp < 1 || vpp < 1 || micro_batches < 1)
    throw ValidationError("simulate_pipeline: degrees and micro_batches must be >= 1");
  if (stage_fwd_s <= 0 || stage_bwd_s <= 0)
    throw ValidationError("simulate_pipeline: stage times must be positive");

  const std::int64_t vm = vpp * micro_batches;  // virtual microbatches
  const double cf = stage_fwd_s / vpp;
  const double cb = stage_bwd_s / vpp;
  const std::size_t stages = static_cast<std::size_t>(pp);
  const std::size_t jobs = static_cast<std::size_t>(vm);

  struct Op {
    bool backward;
    std::size_t job;
  };
  std::vector<std::vector<Op>> order(stages);
  for (std::size_t s = 0; s < stages; ++s) {
    std::size_t warmup = std::min<std::size_t>(stages - 1 - s, jobs);
    std::size_t f = 0, b = 0;
    auto& seq = order[s];
    while (f < warmup) seq.push_back({false, f++});
    while (f < jobs || b < jobs) {
      if (f < jobs) seq.push_back({false, f++});
      if (b < jobs) seq.push_back({true, b++});
    }
  }

  constexpr double kPending = -1.0;
  std::vector<std::vector<double>> fwd_fin(jobs, std::vector<double>(stages, kPending));
  std::vector<std::vector<double>> bwd_fin(jobs, std::vector<double>(stages, kPending));
  std::vector<std::size_t> cursor(stages, 0);
  std::vector<double> stage_free(stages, 0.0);

  std::size_t done = 0;
  const std::size_t total = 2 * jobs * stages;
  while (done < total) {
    bool progressed = false;
    for (std::size_t s = 0; s < stages; ++s) {
      while (cursor[s] < order[s].size()) {
        const Op op = order[s][cursor[s]];
        double dep;
        if (!op.backward) {
          if (s == 0) {
            dep = 0.0;
          } else if (fwd_fin[op.job][s - 1] == kPending) {
            break;
          } else {
            dep = fwd_fin[op.job][s - 1];
          }
          const double start = std::max(stage_free[s], dep);
          fwd_fin[op.job][s] = start + cf;
          stage_free[s] = start + cf;
        } else {
          if (s == stages - 1) {
            if (fwd_fin[op.job][s] == kPending) break;
            dep = fwd_fin[op.job][s];
          } else if (bwd_fin[op.job][s + 1] == kPending) {
            break;
          } else {
            dep = bwd_fin[op.job][s + 1];
          }
          const double start = std::max(stage_free[s], dep);
          bwd_fin[op.job][s] = start + cb;
          stage_free[s] = start + cb;
        }
        ++cursor[s];
        ++done;
        progressed = true;
      }
    }
    if (!progressed) throw DomainError("simulate_pipeline: schedule deadlock");
  }

  PipelineTiming t;
  for (double f : stage_free) t.makespan_s = std::max(t.makespan_s, f);
  const double work = static_cast<double>(micro_batches) * (stage_fwd_s + stage_bwd_s);
  t.bubble_fraction = 1.0 - work / t.makespan_s;
  return t;
}

inline double closed_form_bubble(std::int64_t pp, std::int64_t vpp, std::int64_t micro_batches) {
  return static_cast<double>(pp - 1) / (static_cast<double>(vpp) * micro_batches + pp - 1);
}

struct OverlapModel {
  double tp_overlap_eff = 0.8;       // fraction of TP comm hidden behind compute
  bool dp_overlap = false;           // hide DP collectives behind edge microbatches
  bool forward_hooks_active = false; // monitoring hooks disable the forward-side overlap
  double kernel_efficiency = 0.55;   // fraction of peak attainable by dense compute
};

struct IterationEstimate {
  double compute_s = 0;
  double exposed_comm_s = 0;
  double bubble_fraction = 0;
  double iteration_s = 0;
  double mfu = 0;
  MemoryReport memory;
};

inline double mfu(double useful_tflops_per_iter, double iteration_s, const ClusterSpec& cluster) {
  if (useful_tflops_per_iter <= 0 || iteration_s <= 0)
    throw ValidationError("mfu: inputs must be positive");
  const double v = useful_tflops_per_iter /
                   (iteration_s * cluster.total_gpus() * cluster.peak_tflops_per_gpu);
  if (v > 1.0)
    throw DomainError("mfu exceeds 1: cost model inconsistent (" + std::to_string(v) + ")");
  return v;
}

class InfeasibleMemoryError : public DomainError {
 public:
  InfeasibleMemoryError(const std::string& what, MemoryReport report)
      : DomainError(what), report_(report) {}
  const MemoryReport& report() const { return report_; }

 private:
  MemoryReport report_;
};

struct EstimateOptions {
  OverlapModel overlap;
  double activation_bytes_per_token = 0;  // 0 -> derive 34*hidden bytes (bf16 transformer layer)
  MemoryOptions memory;
  CommOptions comm;
  double fwd_bwd_ratio = 2.0;  // backward time / forward time
};

inline double default_activation_bytes_per_token(const ModelSpec& model) {
  return 34.0 * model.hidden_dim;  // standard bf16 transformer activation footprint per layer
}

inline IterationEstimate estimate_iteration(const ModelSpec& model, const ParallelismConfig& cfg,
                                            const ClusterSpec& cluster,
                                            const ResolutionBucket& bucket,
                                            std::int64_t batch_per_dp_rank,
                                            const CostCoefficients& coeffs,
                                            const EstimateOptions& opt = {}) {
  auto report = validate_config(cfg, cluster);
  if (!report.ok()) throw ValidationError("invalid config: " + report.diagnostics.front());
  if (batch_per_dp_rank < 1) throw ValidationError("batch_per_dp_rank must be >= 1");

  const double act_bytes = opt.activation_bytes_per_token > 0
                               ? opt.activation_bytes_per_token
                               : default_activation_bytes_per_token(model);
  MemoryOptions mem_opt = opt.memory;
  mem_opt.samples_per_microbatch =
      std::max<std::int64_t>(1, batch_per_dp_rank / cfg.micro_batches);
  const MemoryReport mem = memory_breakdown(model, cfg, bucket, act_bytes, mem_opt);
  if (mem.total_gb > cluster.hbm_gb) {
    throw InfeasibleMemoryError("memory: " + std::to_string(mem.total_gb) + " GB exceeds " +
                                    std::to_string(cluster.hbm_gb) + " GB HBM",
                                mem);
  }

  IterationEstimate est;
  est.memory = mem;

  const double flops_per_sample = sample_flops(coeffs, bucket);
  const double useful_tflops_replica = flops_per_sample * batch_per_dp_rank;
  const double replica_gpus = static_cast<double>(cfg.tp) * cfg.cp * cfg.pp;
  est.compute_s = useful_tflops_replica /
                  (replica_gpus * cluster.peak_tflops_per_gpu * opt.overlap.kernel_efficiency);

  const double m = static_cast<double>(cfg.micro_batches);
  const double per_mb = est.compute_s / m;
  const double tf = per_mb / (1.0 + opt.fwd_bwd_ratio);
  const double tb = per_mb - tf;
  const PipelineTiming pipe = simulate_pipeline(cfg.pp, cfg.vpp, cfg.micro_batches, tf, tb);
  est.bubble_fraction = pipe.bubble_fraction;

  const double microbatch_tokens =
      static_cast<double>(bucket.tokens()) * batch_per_dp_rank / m;
  const CommReport comm = comm_volumes(model, cfg, cluster, bucket, microbatch_tokens, opt.comm);

  double exposed = comm.time_of(CollectiveKind::kTpCollective) * (1.0 - opt.overlap.tp_overlap_eff);
  exposed += comm.time_of(CollectiveKind::kCpAll2All);
  exposed += comm.time_of(CollectiveKind::kPpP2p);
  const double ag = comm.time_of(CollectiveKind::kDpAllGather);
  const double rs = comm.time_of(CollectiveKind::kDpReduceScatter);
  if (opt.overlap.dp_overlap) {
    // all-gather hides behind the first microbatch forward, reduce-scatter
    // behind the last microbatch backward; excess is exposed
    exposed += opt.overlap.forward_hooks_active ? ag : std::max(0.0, ag - tf);
    exposed += std::max(0.0, rs - tb);
  } else {
    exposed += ag + rs;
  }
  est.exposed_comm_s = exposed;
  est.iteration_s = pipe.makespan_s + exposed;
  est.mfu = mfu(useful_tflops_replica * cfg.dp, est.iteration_s, cluster);
  return est;
}

struct SearchSpace {
  std::vector<std::int64_t> tp_candidates{1, 2, 4, 8};
  std::vector<std::int64_t> cp_candidates{1, 2, 4};
  std::vector<std::int64_t> pp_candidates{1, 2, 4};
  std::vector<std::int64_t> vpp_candidates{1, 2};
  std::vector<std::int64_t> micro_batch_candidates{8};
  std::vector<bool> sp_candidates{true};
  std::vector<bool> zero1_candidates{true};
  std::int64_t batch_per_dp_rank = 1;
  double ckpt_fraction = 1.0;
};

struct SearchEntry {
  ParallelismConfig config;
  IterationEstimate estimate;
};

struct InfeasibleEntry {
  ParallelismConfig config;
  std::string reason;
};

struct SearchReport {
  std::vector<SearchEntry> entries;        // sorted by mfu descending
  std::vector<InfeasibleEntry> infeasible;
  std::optional<ParallelismConfig> pinned;
  std::optional<double> pinned_mfu;
  std::optional<double> pinned_gap;  // pinned mfu - best mfu (negative when pinned is worse)
};

inline SearchReport search_configs(const ModelSpec& model, const ClusterSpec& cluster,
                                   const ResolutionBucket& bucket, const SearchSpace& space,
                                   const CostCoefficients& coeffs,
                                   const EstimateOptions& opt = {},
                                   const std::optional<ParallelismConfig>& pin = std::nullopt) {
  SearchReport rep;
  const std::int64_t gpus = cluster.total_gpus();
  for (std::int64_t tp : space.tp_candidates) {
    for (std::int64_t cp : space.cp_candidates) {
      for (std::int64_t pp : space.pp_candidates) {
        if (tp * cp * pp == 0 || gpus % (tp * cp * pp) != 0) continue;
        const std::int64_t dp = gpus / (tp * cp * pp);
        for (std::int64_t vpp : space.vpp_candidates) {
          if (vpp > 1 && pp == 1) continue;
          if (pp * vpp > model.layers) continue;
          for (std::int64_t m : space.micro_batch_candidates) {
            for (bool sp : space.sp_candidates) {
              for (bool zero1 : space.zero1_candidates) {
                ParallelismConfig cfg;
                cfg.tp = tp;
                cfg.sp = sp;
                cfg.cp = cp;
                cfg.pp = pp;
                cfg.vpp = vpp;
                cfg.dp = dp;
                cfg.zero1 = zero1;
                cfg.micro_batches = m;
                cfg.ckpt_fraction = space.ckpt_fraction;
                if (!validate_config(cfg, cluster).ok()) continue;
                try {
                  rep.entries.push_back(
                      {cfg, estimate_iteration(model, cfg, cluster, bucket,
                                               space.batch_per_dp_rank, coeffs, opt)});
                } catch (const InfeasibleMemoryError& e) {
                  rep.infeasible.push_back({cfg, std::string("memory: ") + e.what()});
                } catch (const DomainError& e) {
                  rep.infeasible.push_back({cfg, e.what()});
                }
              }
            }
          }
        }
      }
    }
  }
  std::stable_sort(rep.entries.begin(), rep.entries.end(),
                   [](const SearchEntry& a, const SearchEntry& b) {
                     if (a.estimate.mfu != b.estimate.mfu) return a.estimate.mfu > b.estimate.mfu;
                     return a.config.key() < b.config.key();
                   });
  if (pin) {
    rep.pinned = *pin;
    try {
      auto est =
          estimate_iteration(model, *pin, cluster, bucket, space.batch_per_dp_rank, coeffs, opt);
      rep.pinned_mfu = est.mfu;
      if (!rep.entries.empty()) rep.pinned_gap = est.mfu - rep.entries.front().estimate.mfu;
    } catch (const DomainError&) {
      // pinned config infeasible: gap left unset
    }
  }
  return rep;
}

}  // namespace ditforge
