#pragma once

#include <algorithm>
#include <cfenv>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "ditforge/cost_model.hpp"
#include "ditforge/error.hpp"
#include "ditforge/model_spec.hpp"

namespace ditforge {

struct BalancerConfig {
  double f_target = 0;     // target FLOPs per batch (TFLOPs)
  double alpha = 1.0;      // normalization factor
  double beta = 0.0;       // video-to-image ratio
  std::int64_t cache_n = 8;
  double image_flops = 44.99;  // TFLOPs per image sample
};

struct ResolutionBatchSize {
  FlopsRow row;
  std::int64_t batch_size = 0;
};

namespace detail {

// floor with a tiny relative guard so exact ratios (F_target/F_r integral)
// do not fall to the lower integer through rounding noise
inline std::int64_t guarded_floor(double x) {
  return static_cast<std::int64_t>(std::floor(x * (1.0 + 1e-12) + 1e-12));
}

}  // namespace detail

// B_r = floor(F_target / (alpha * F_r)) for every table row, in row order.
inline std::vector<ResolutionBatchSize> coarse_batch_sizes(const FlopsTable& table,
                                                           const FlopsRow& target,
                                                           double alpha) {
  if (alpha <= 0) throw ValidationError("alpha must be positive");
  const double f_target = target.tflops;
  std::vector<ResolutionBatchSize> out;
  for (const auto& row : table.rows) {
    const std::int64_t b = detail::guarded_floor(f_target / (alpha * row.tflops));
    if (b < 1)
      throw DomainError("alpha too large: batch size 0 at resolution " +
                        std::to_string(row.frames) + "x" + std::to_string(row.height) + "x" +
                        std::to_string(row.width));
    out.push_back({row, b});
  }
  return out;
}

inline FlopsRow find_row(const FlopsTable& table, std::int64_t frames, std::int64_t height,
                         std::int64_t width) {
  for (const auto& r : table.rows)
    if (r.frames == frames && r.height == height && r.width == width) return r;
  throw DomainError("resolution " + std::to_string(frames) + "x" + std::to_string(height) + "x" +
                    std::to_string(width) + " not in FLOPs table");
}

// Largest alpha such that sum_r weight_r * B_r(alpha) >= global_batch.
// Binary search down to 1e-9, then a floor-aware scan over the exact
// breakpoints F_target/(n*F_r) inside the final bracket.
inline double solve_alpha(const FlopsTable& table, const FlopsRow& target,
                          const std::vector<double>& weights, std::int64_t global_batch) {
  if (weights.size() != table.rows.size())
    throw ValidationError("solve_alpha: one weight per table row required");
  if (global_batch < static_cast<std::int64_t>(table.rows.size()))
    throw DomainError("global batch " + std::to_string(global_batch) +
                      " below resolution count " + std::to_string(table.rows.size()));

  const double f_target = target.tflops;
  // an alpha where any row floors to zero is infeasible: every resolution
  // must keep at least one sample per batch
  auto total = [&](double alpha) {
    double sum = 0;
    for (std::size_t i = 0; i < table.rows.size(); ++i) {
      const std::int64_t b = detail::guarded_floor(f_target / (alpha * table.rows[i].tflops));
      if (b < 1) return -1.0;
      sum += weights[i] * static_cast<double>(b);
    }
    return sum;
  };

  double lo = 1e-12;
  if (total(lo) < static_cast<double>(global_batch))
    throw DomainError("global batch unreachable even as alpha -> 0");
  double hi = f_target;
  for (const auto& r : table.rows) hi = std::max(hi, f_target / r.tflops);
  hi *= 2.0;
  while (total(hi) >= static_cast<double>(global_batch)) hi *= 2.0;
  while (hi - lo > 1e-9) {
    const double mid = 0.5 * (lo + hi);
    (total(mid) >= static_cast<double>(global_batch) ? lo : hi) = mid;
  }
  // exact breakpoints inside [lo, hi]
  double best = lo;
  for (const auto& r : table.rows) {
    const std::int64_t n_lo = detail::guarded_floor(f_target / (lo * r.tflops));
    const std::int64_t n_hi = std::max<std::int64_t>(1, detail::guarded_floor(f_target / (hi * r.tflops)));
    for (std::int64_t n = n_hi; n <= n_lo + 1; ++n) {
      if (n < 1) continue;
      const double cand = f_target / (static_cast<double>(n) * r.tflops);
      if (cand >= lo - 1e-12 && cand <= hi + 1e-12 &&
          total(cand) >= static_cast<double>(global_batch))
        best = std::max(best, cand);
    }
  }
  return best;
}

struct PaddedBatch {
  std::size_t batch_id = 0;
  double base_flops = 0;
  std::int64_t images_added = 0;
  double final_flops = 0;
};

// Greedy image padding: each image goes to the batch with the smallest
// current FLOPs, breaking ties toward the lowest batch id.
inline std::vector<PaddedBatch> greedy_pad(const std::vector<double>& base_flops,
                                           std::int64_t image_budget, double image_flops) {
  if (image_budget < 0) throw ValidationError("image_budget must be >= 0");
  std::vector<PaddedBatch> out;
  out.reserve(base_flops.size());
  for (std::size_t i = 0; i < base_flops.size(); ++i)
    out.push_back({i, base_flops[i], 0, base_flops[i]});
  for (std::int64_t img = 0; img < image_budget && !out.empty(); ++img) {
    std::size_t min_i = 0;
    for (std::size_t i = 1; i < out.size(); ++i)
      if (out[i].final_flops < out[min_i].final_flops) min_i = i;
    out[min_i].images_added += 1;
    out[min_i].final_flops += image_flops;
  }
  return out;
}

// round-half-to-even, matching the documented budget rounding rule
inline std::int64_t image_budget(std::int64_t total_videos, double beta) {
  if (beta < 0) throw ValidationError("beta must be >= 0");
  const double x = beta * static_cast<double>(total_videos);
  const double fl = std::floor(x);
  const double frac = x - fl;
  if (std::fabs(frac - 0.5) < 1e-12) {
    const auto lower = static_cast<std::int64_t>(fl);
    return lower % 2 == 0 ? lower : lower + 1;
  }
  return static_cast<std::int64_t>(std::llround(x));
}

// Exhaustive minimizer of the max final load; test-support oracle for greedy.
inline double brute_force_pad(const std::vector<double>& base_flops, std::int64_t budget,
                              double image_flops) {
  if (base_flops.size() > 6 || budget > 10)
    throw DomainError("brute_force_pad: instance too large for exhaustive search");
  if (base_flops.empty()) throw ValidationError("brute_force_pad: no batches");
  double best = std::numeric_limits<double>::infinity();
  std::vector<double> cur(base_flops);
  auto rec = [&](auto&& self, std::size_t i, std::int64_t remaining) -> void {
    if (i + 1 == cur.size()) {
      const double old = cur[i];
      cur[i] += static_cast<double>(remaining) * image_flops;
      best = std::min(best, *std::max_element(cur.begin(), cur.end()));
      cur[i] = old;
      return;
    }
    for (std::int64_t n = 0; n <= remaining; ++n) {
      const double old = cur[i];
      cur[i] += static_cast<double>(n) * image_flops;
      self(self, i + 1, remaining - n);
      cur[i] = old;
    }
  };
  rec(rec, 0, budget);
  return best;
}

enum class AspectBucket { kLandscape, kPortrait, kSquare };

inline const char* to_string(AspectBucket a) {
  switch (a) {
    case AspectBucket::kLandscape: return "landscape";
    case AspectBucket::kPortrait: return "portrait";
    case AspectBucket::kSquare: return "square";
  }
  return "?";
}

struct ClipBucket {
  std::int64_t frame_bucket = 0;
  AspectBucket aspect = AspectBucket::kSquare;
};

inline std::vector<std::int64_t> default_frame_buckets() { return {1, 68, 136, 204}; }

// frame bucket: the largest configured bucket <= the clip's frame count
// (short clips degrade to the image bucket); aspect bucket: closest
// log-ratio among landscape 9:16, portrait 16:9, square 1:1.
inline ClipBucket bucketize(std::int64_t frames, std::int64_t height, std::int64_t width,
                            const std::vector<std::int64_t>& frame_buckets = default_frame_buckets()) {
  if (frames < 1) throw ValidationError("bucketize: frames must be >= 1");
  if (height < 1 || width < 1) throw ValidationError("bucketize: pixels must be >= 1");
  ClipBucket out;
  out.frame_bucket = 0;
  for (auto b : frame_buckets)
    if (b <= frames) out.frame_bucket = std::max(out.frame_bucket, b);
  if (out.frame_bucket == 0)
    out.frame_bucket = *std::min_element(frame_buckets.begin(), frame_buckets.end());

  const double log_ratio = std::log(static_cast<double>(height) / width);
  struct Canon {
    AspectBucket bucket;
    double log_ratio;
  };
  const Canon canons[] = {
      {AspectBucket::kLandscape, std::log(9.0 / 16.0)},
      {AspectBucket::kPortrait, std::log(16.0 / 9.0)},
      {AspectBucket::kSquare, 0.0},
  };
  double best = std::numeric_limits<double>::infinity();
  for (const auto& c : canons) {
    const double d = std::fabs(log_ratio - c.log_ratio);
    if (d < best) {
      best = d;
      out.aspect = c.bucket;
    }
  }
  return out;
}

struct ClipRecord {
  std::string id;
  std::int64_t frames = 0;
  std::int64_t height = 0;
  std::int64_t width = 0;
  std::string source_url;
  double duration_s = 0;
};

inline ClipRecord clip_record_from_json(const json& j) {
  detail::require_fields(j, {"id", "frames", "height", "width"}, {"source_url", "duration_s"},
                         "clip record");
  ClipRecord c;
  c.id = j.at("id").get<std::string>();
  c.frames = j.at("frames").get<std::int64_t>();
  c.height = j.at("height").get<std::int64_t>();
  c.width = j.at("width").get<std::int64_t>();
  c.source_url = j.value("source_url", std::string{});
  c.duration_s = j.value("duration_s", 0.0);
  return c;
}

struct BatchPlan {
  std::vector<ResolutionBatchSize> per_resolution;
  std::vector<PaddedBatch> padded_batches;
  double alpha = 1.0;
  std::int64_t image_budget = 0;
};

inline json batch_plan_to_json(const BatchPlan& p) {
  json j;
  j["alpha"] = p.alpha;
  j["image_budget"] = p.image_budget;
  j["per_resolution"] = json::array();
  for (const auto& r : p.per_resolution)
    j["per_resolution"].push_back({{"frames", r.row.frames},
                                   {"height", r.row.height},
                                   {"width", r.row.width},
                                   {"tflops", r.row.tflops},
                                   {"batch_size", r.batch_size}});
  j["padded_batches"] = json::array();
  for (const auto& b : p.padded_batches)
    j["padded_batches"].push_back({{"batch_id", b.batch_id},
                                   {"base_flops", b.base_flops},
                                   {"images_added", b.images_added},
                                   {"final_flops", b.final_flops}});
  return j;
}

// Streaming planner over manifest clips: bucketizes clips, fills B_r-sized
// batches per resolution in arrival order, caches up to cache_n full video
// batches, then pads them with the beta-derived image budget.
inline BatchPlan plan_batches(const std::vector<ClipRecord>& clips, const FlopsTable& table,
                              const FlopsRow& target, const BalancerConfig& cfg) {
  BatchPlan plan;
  plan.alpha = cfg.alpha;
  plan.per_resolution = coarse_batch_sizes(table, target, cfg.alpha);

  std::map<std::pair<std::int64_t, std::pair<std::int64_t, std::int64_t>>, std::int64_t> fill;
  std::vector<double> cached_bases;
  std::int64_t cached_videos = 0;
  std::vector<std::int64_t> frame_buckets;
  for (const auto& r : table.rows) frame_buckets.push_back(r.frames);

  for (const auto& clip : clips) {
    if (static_cast<std::int64_t>(cached_bases.size()) >= cfg.cache_n) break;
    const ClipBucket cb = bucketize(clip.frames, clip.height, clip.width, frame_buckets);
    // find the table row matching this clip's frame bucket and resolution shape
    const ResolutionBatchSize* match = nullptr;
    for (const auto& rb : plan.per_resolution) {
      if (rb.row.frames != cb.frame_bucket) continue;
      const ClipBucket row_aspect = bucketize(rb.row.frames, rb.row.height, rb.row.width, frame_buckets);
      if (row_aspect.aspect == cb.aspect) {
        match = &rb;
        break;
      }
    }
    if (!match) continue;  // no configured shape for this clip
    if (match->row.frames <= 1) continue;  // image rows are padding material, not batches
    auto key = std::make_pair(match->row.frames, std::make_pair(match->row.height, match->row.width));
    if (++fill[key] == match->batch_size) {
      cached_bases.push_back(match->row.tflops * static_cast<double>(match->batch_size));
      cached_videos += match->batch_size;
      fill[key] = 0;
    }
  }

  plan.image_budget = ditforge::image_budget(cached_videos, cfg.beta);
  plan.padded_batches = greedy_pad(cached_bases, plan.image_budget, cfg.image_flops);
  return plan;
}

}  // namespace ditforge
