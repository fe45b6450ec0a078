#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <fstream>
#include <map>
#include <ctime>
#include <mutex>
#include <optional>
#include <pthread.h>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "ditforge/error.hpp"
#include "ditforge/model_spec.hpp"

namespace ditforge {

enum class EventKind { kTimer, kData, kFault, kSignal };
enum class Stage { kForward, kBackward, kOptimizer, kDataloader };
enum class FaultClass { kFatal, kNonFatal };

inline const char* to_string(EventKind k) {
  switch (k) {
    case EventKind::kTimer: return "timer";
    case EventKind::kData: return "data";
    case EventKind::kFault: return "fault";
    case EventKind::kSignal: return "signal";
  }
  return "?";
}

inline const char* to_string(Stage s) {
  switch (s) {
    case Stage::kForward: return "forward";
    case Stage::kBackward: return "backward";
    case Stage::kOptimizer: return "optimizer";
    case Stage::kDataloader: return "dataloader";
  }
  return "?";
}

inline Stage stage_from_string(const std::string& s) {
  if (s == "forward") return Stage::kForward;
  if (s == "backward") return Stage::kBackward;
  if (s == "optimizer") return Stage::kOptimizer;
  if (s == "dataloader") return Stage::kDataloader;
  throw ValidationError("unknown stage '" + s + "'");
}

constexpr const char* kSignalTrafficDisrupted = "traffic_disrupted";
constexpr const char* kSignalLowGpuPower = "low_gpu_power";
constexpr const char* kSignalLogsStale = "logs_stale";

struct SampleMeta {
  std::string id;
  std::int64_t frames = 0;
  std::int64_t height = 0;
  std::int64_t width = 0;
  std::string source_url;
};

struct EventRecord {
  EventKind kind = EventKind::kTimer;
  std::string producer_id;
  std::uint64_t sequence = 0;
  std::int64_t rank = 0;
  std::int64_t iteration = 0;
  std::int64_t wall_ns = 0;
  // timer
  Stage stage = Stage::kForward;
  std::int64_t duration_ns = 0;
  // data
  SampleMeta sample;
  // fault
  FaultClass fault_class = FaultClass::kFatal;
  bool transient = false;
  // signal
  std::string signal_name;
  bool signal_active = false;
};

inline json event_to_json(const EventRecord& e) {
  json j;
  j["kind"] = to_string(e.kind);
  j["producer"] = e.producer_id;
  j["seq"] = e.sequence;
  j["rank"] = e.rank;
  j["iteration"] = e.iteration;
  j["wall_ns"] = e.wall_ns;
  switch (e.kind) {
    case EventKind::kTimer:
      j["stage"] = to_string(e.stage);
      j["duration_ns"] = e.duration_ns;
      break;
    case EventKind::kData:
      j["sample"] = {{"id", e.sample.id},
                     {"frames", e.sample.frames},
                     {"height", e.sample.height},
                     {"width", e.sample.width},
                     {"source_url", e.sample.source_url}};
      break;
    case EventKind::kFault:
      j["fault_class"] = e.fault_class == FaultClass::kFatal ? "fatal" : "non_fatal";
      j["transient"] = e.transient;
      break;
    case EventKind::kSignal:
      j["signal_name"] = e.signal_name;
      j["active"] = e.signal_active;
      break;
  }
  return j;
}

inline EventRecord event_from_json(const json& j) {
  EventRecord e;
  const std::string kind = j.at("kind").get<std::string>();
  e.producer_id = j.at("producer").get<std::string>();
  e.sequence = j.at("seq").get<std::uint64_t>();
  e.rank = j.value("rank", std::int64_t{0});
  e.iteration = j.value("iteration", std::int64_t{0});
  e.wall_ns = j.value("wall_ns", std::int64_t{0});
  if (kind == "timer") {
    e.kind = EventKind::kTimer;
    e.stage = stage_from_string(j.at("stage").get<std::string>());
    e.duration_ns = j.at("duration_ns").get<std::int64_t>();
    if (e.duration_ns < 0) throw ValidationError("negative duration_ns");
  } else if (kind == "data") {
    e.kind = EventKind::kData;
    const auto& s = j.at("sample");
    e.sample = {s.at("id").get<std::string>(), s.value("frames", std::int64_t{0}),
                s.value("height", std::int64_t{0}), s.value("width", std::int64_t{0}),
                s.value("source_url", std::string{})};
  } else if (kind == "fault") {
    e.kind = EventKind::kFault;
    const std::string fc = j.at("fault_class").get<std::string>();
    if (fc == "fatal") e.fault_class = FaultClass::kFatal;
    else if (fc == "non_fatal") e.fault_class = FaultClass::kNonFatal;
    else throw ValidationError("unknown fault_class '" + fc + "'");
    e.transient = j.value("transient", false);
  } else if (kind == "signal") {
    e.kind = EventKind::kSignal;
    e.signal_name = j.at("signal_name").get<std::string>();
    e.signal_active = j.at("active").get<bool>();
  } else {
    throw ValidationError("unknown event kind '" + kind + "'");
  }
  return e;
}

// Asynchronous event recorder. record() only enqueues into a bounded
// in-memory buffer; a background flusher appends batches to a line-delimited
// JSON spool file. When the buffer is full the event is shed, never blocking
// the training path.
// CPU time of the calling thread; the honest basis for overhead accounting
// on machines where wall clock includes scheduler and cgroup noise
inline double thread_cpu_seconds() {
  timespec ts{};
  clock_gettime(CLOCK_THREAD_CPUTIME_ID, &ts);
  return static_cast<double>(ts.tv_sec) + static_cast<double>(ts.tv_nsec) * 1e-9;
}

struct RecorderOptions {
  std::size_t buffer_capacity = 65536;
  std::chrono::milliseconds flush_interval{50};
};

class Recorder {
 public:
  using Options = RecorderOptions;

  Recorder(std::filesystem::path spool_dir, std::string producer_id, Options opt = {})
      : spool_path_(spool_dir / (producer_id + ".events.jsonl")),
        producer_id_(std::move(producer_id)),
        opt_(opt) {
    std::filesystem::create_directories(spool_dir);
    flusher_ = std::thread([this] { flush_loop(); });
  }

  ~Recorder() { close(); }

  bool record(EventRecord e) {
    e.producer_id = producer_id_;
    {
      std::lock_guard lk(mu_);
      if (closed_) return false;
      e.sequence = next_seq_++;
      if (buf_.size() >= opt_.buffer_capacity) {
        ++shed_;
        return false;
      }
      buf_.push_back(std::move(e));
      ++accepted_;
    }
    // no wakeup here: the flusher polls on its interval, and a syscall per
    // event would defeat the low-overhead contract of the hot path
    return true;
  }

  std::uint64_t accepted() const {
    std::lock_guard lk(mu_);
    return accepted_;
  }
  std::uint64_t shed() const {
    std::lock_guard lk(mu_);
    return shed_;
  }

  void pause_flusher() { paused_.store(true); }
  void resume_flusher() {
    paused_.store(false);
    cv_.notify_one();
  }

  void flush() {
    std::deque<EventRecord> batch;
    {
      std::lock_guard lk(mu_);
      std::swap(batch, buf_);
    }
    write_batch(batch);
  }

  void close() {
    {
      std::lock_guard lk(mu_);
      if (closed_) return;
      closed_ = true;
    }
    paused_.store(false);
    cv_.notify_all();
    if (flusher_.joinable()) flusher_.join();
    flush();
  }

  const std::filesystem::path& spool_path() const { return spool_path_; }

  // CPU seconds consumed so far by the background flusher (0 once joined)
  double flusher_cpu_seconds() {
    if (!flusher_.joinable()) return 0.0;
    clockid_t cid;
    if (pthread_getcpuclockid(flusher_.native_handle(), &cid) != 0) return 0.0;
    timespec ts{};
    if (clock_gettime(cid, &ts) != 0) return 0.0;
    return static_cast<double>(ts.tv_sec) + static_cast<double>(ts.tv_nsec) * 1e-9;
  }

 private:
  void flush_loop() {
    std::unique_lock lk(mu_);
    while (!closed_) {
      // wake on close or on the flush cadence only: waking per event would
      // turn every record into a file write
      cv_.wait_for(lk, opt_.flush_interval, [&] { return closed_; });
      if (paused_.load()) continue;
      std::deque<EventRecord> batch;
      std::swap(batch, buf_);
      lk.unlock();
      write_batch(batch);
      lk.lock();
    }
  }

  void write_batch(const std::deque<EventRecord>& batch) {
    if (batch.empty()) return;
    std::lock_guard file_lk(file_mu_);
    std::ofstream out(spool_path_, std::ios::app);
    for (const auto& e : batch) out << event_to_json(e).dump() << '\n';
  }

  std::filesystem::path spool_path_;
  std::string producer_id_;
  Options opt_;
  mutable std::mutex mu_;
  std::mutex file_mu_;
  std::condition_variable cv_;
  std::deque<EventRecord> buf_;
  std::uint64_t next_seq_ = 0;
  std::uint64_t accepted_ = 0;
  std::uint64_t shed_ = 0;
  std::atomic<bool> paused_{false};
  bool closed_ = false;
  std::thread flusher_;
};

struct QuarantinedLine {
  std::string file;
  std::size_t line_no;
  std::string reason;
};

// Append-only event tables with idempotent ingestion on (producer, seq).
class TelemetryStore {
 public:
  void add(const EventRecord& e) {
    if (!seen_.insert({e.producer_id, e.sequence}).second) return;
    switch (e.kind) {
      case EventKind::kTimer: timers_.push_back(e); break;
      case EventKind::kData: data_.push_back(e); break;
      case EventKind::kFault: faults_.push_back(e); break;
      case EventKind::kSignal: signals_.push_back(e); break;
    }
  }

  const std::vector<EventRecord>& timers() const { return timers_; }
  const std::vector<EventRecord>& data() const { return data_; }
  const std::vector<EventRecord>& faults() const { return faults_; }
  const std::vector<EventRecord>& signals() const { return signals_; }
  const std::vector<QuarantinedLine>& quarantined() const { return quarantined_; }

  std::size_t size() const {
    return timers_.size() + data_.size() + faults_.size() + signals_.size();
  }

  void quarantine(QuarantinedLine q) { quarantined_.push_back(std::move(q)); }

  json to_json() const {
    json j;
    j["timers"] = json::array();
    for (const auto& e : timers_) j["timers"].push_back(event_to_json(e));
    j["data"] = json::array();
    for (const auto& e : data_) j["data"].push_back(event_to_json(e));
    j["faults"] = json::array();
    for (const auto& e : faults_) j["faults"].push_back(event_to_json(e));
    j["signals"] = json::array();
    for (const auto& e : signals_) j["signals"].push_back(event_to_json(e));
    return j;
  }

 private:
  std::vector<EventRecord> timers_, data_, faults_, signals_;
  std::set<std::pair<std::string, std::uint64_t>> seen_;
  std::vector<QuarantinedLine> quarantined_;
};

inline TelemetryStore ingest(const std::filesystem::path& spool_dir) {
  TelemetryStore store;
  if (!std::filesystem::exists(spool_dir)) return store;
  std::vector<std::filesystem::path> files;
  for (const auto& entry : std::filesystem::directory_iterator(spool_dir)) {
    if (entry.is_regular_file() && entry.path().string().ends_with(".events.jsonl"))
      files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());  // order-independent result, deterministic quarantine
  for (const auto& file : files) {
    std::ifstream in(file);
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      if (line.empty()) continue;
      try {
        store.add(event_from_json(json::parse(line)));
      } catch (const std::exception& e) {
        store.quarantine({file.string(), line_no, e.what()});
      }
    }
  }
  return store;
}

struct StragglerReport {
  std::vector<std::int64_t> flagged_ranks;
  std::map<std::int64_t, double> rank_median_ns;
  double global_median_ns = 0;
  double mad_ns = 0;
  double threshold_ns = 0;
};

namespace detail {

inline double median(std::vector<double> v) {
  if (v.empty()) throw DomainError("median of empty set");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace detail

// Robust outlier test on per-rank median stage times: a rank is a straggler
// when its median exceeds the global median by more than k median absolute
// deviations.
inline StragglerReport detect_stragglers(const TelemetryStore& store, std::int64_t iter_begin,
                                         std::int64_t iter_end, Stage stage, double k = 6.0) {
  std::map<std::int64_t, std::vector<double>> by_rank;
  std::set<std::int64_t> iterations;
  for (const auto& e : store.timers()) {
    if (e.stage != stage || e.iteration < iter_begin || e.iteration >= iter_end) continue;
    by_rank[e.rank].push_back(static_cast<double>(e.duration_ns));
    iterations.insert(e.iteration);
  }
  if (by_rank.size() < 2)
    throw DomainError("insufficient data: need >= 2 ranks, have " +
                      std::to_string(by_rank.size()));
  if (iterations.size() < 5)
    throw DomainError("insufficient data: need >= 5 iterations, have " +
                      std::to_string(iterations.size()));

  StragglerReport rep;
  std::vector<double> all;
  for (const auto& [rank, durations] : by_rank) {
    rep.rank_median_ns[rank] = detail::median(durations);
    all.insert(all.end(), durations.begin(), durations.end());
  }
  // dispersion over the full duration population, not the handful of rank
  // medians: with few ranks the medians' own MAD collapses under benign
  // noise and flags healthy ranks
  rep.global_median_ns = detail::median(all);
  std::vector<double> dev;
  dev.reserve(all.size());
  for (double d : all) dev.push_back(std::fabs(d - rep.global_median_ns));
  rep.mad_ns = detail::median(dev);
  rep.threshold_ns = rep.global_median_ns + k * rep.mad_ns;
  for (const auto& [rank, m] : rep.rank_median_ns)
    if (m > rep.threshold_ns) rep.flagged_ranks.push_back(rank);
  return rep;
}

// total iteration time / total wall-clock span of the job
inline double effective_training_time(const TelemetryStore& store) {
  if (store.timers().empty()) throw DomainError("no timer events");
  std::int64_t first = std::numeric_limits<std::int64_t>::max();
  std::int64_t last = std::numeric_limits<std::int64_t>::min();
  // iteration time is accounted on one reference rank so overlapping
  // per-rank timers are not double counted
  std::int64_t ref_rank = std::numeric_limits<std::int64_t>::max();
  for (const auto& e : store.timers()) ref_rank = std::min(ref_rank, e.rank);
  double iteration_ns = 0;
  for (const auto& e : store.timers()) {
    first = std::min(first, e.wall_ns);
    last = std::max(last, e.wall_ns + e.duration_ns);
    if (e.rank == ref_rank) iteration_ns += static_cast<double>(e.duration_ns);
  }
  const double span = static_cast<double>(last - first);
  if (span <= 0) throw DomainError("zero wall-clock span");
  return iteration_ns / span;
}

enum class RestartDecision { kRestart, kContinue };

// restart iff at least q of the three node-health signals are active
inline RestartDecision restart_decision(const std::set<std::string>& active_signals,
                                        std::int64_t quorum = 2) {
  if (quorum < 1) throw ValidationError("quorum must be >= 1");
  std::int64_t active = 0;
  for (const char* name : {kSignalTrafficDisrupted, kSignalLowGpuPower, kSignalLogsStale})
    if (active_signals.count(name)) ++active;
  return active >= quorum ? RestartDecision::kRestart : RestartDecision::kContinue;
}

struct FailureStats {
  double fatal_fraction = 0;
  double non_fatal_fraction = 0;
  double transient_fraction = 0;
  std::size_t total = 0;
};

inline FailureStats failure_stats(const TelemetryStore& store) {
  if (store.faults().empty()) throw DomainError("no fault events");
  FailureStats s;
  s.total = store.faults().size();
  std::size_t fatal = 0, transient = 0;
  for (const auto& e : store.faults()) {
    if (e.fault_class == FaultClass::kFatal) ++fatal;
    if (e.transient) ++transient;
  }
  s.fatal_fraction = static_cast<double>(fatal) / s.total;
  s.non_fatal_fraction = static_cast<double>(s.total - fatal) / s.total;
  s.transient_fraction = static_cast<double>(transient) / s.total;
  return s;
}

struct DataDistribution {
  std::map<std::string, std::size_t> per_source_counts;
  std::map<std::string, std::size_t> duplicates;  // sample id -> occurrences (> 1 only)
};

inline DataDistribution data_distribution(const TelemetryStore& store) {
  DataDistribution d;
  std::map<std::string, std::size_t> id_counts;
  for (const auto& e : store.data()) {
    ++d.per_source_counts[e.sample.source_url];
    ++id_counts[e.sample.id];
  }
  for (const auto& [id, n] : id_counts)
    if (n > 1) d.duplicates[id] = n;
  return d;
}

}  // namespace ditforge
