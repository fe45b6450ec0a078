#pragma once

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "ditforge/error.hpp"
#include "ditforge/frame.hpp"

namespace ditforge {

enum class PipeMode { kBroadcast, kSpray };
enum class PipeRole { kProducer, kConsumer };

inline PipeMode pipe_mode_from_string(const std::string& s) {
  if (s == "broadcast") return PipeMode::kBroadcast;
  if (s == "spray") return PipeMode::kSpray;
  throw ValidationError("unknown pipe mode '" + s + "'");
}

struct PipeDecl {
  std::string name;
  PipeRole role = PipeRole::kConsumer;
  std::string job_id;  // consumers only; producers serve all jobs
  PipeMode mode = PipeMode::kSpray;
};

class BackpressureTimeoutError : public DomainError {
 public:
  BackpressureTimeoutError(const std::string& what, std::string job)
      : DomainError(what), job_(std::move(job)) {}
  const std::string& stalled_job() const { return job_; }

 private:
  std::string job_;
};

class PipeClosedError : public DomainError {
 public:
  explicit PipeClosedError(const std::string& what) : DomainError(what) {}
};

struct LatencySummary {
  std::uint64_t count = 0;
  std::int64_t sum_ns = 0;
  std::int64_t min_ns = 0;
  std::int64_t max_ns = 0;

  void add(std::int64_t ns) {
    if (count == 0 || ns < min_ns) min_ns = ns;
    if (count == 0 || ns > max_ns) max_ns = ns;
    ++count;
    sum_ns += ns;
  }
  double mean_ns() const { return count ? static_cast<double>(sum_ns) / count : 0.0; }
};

struct PipeMetrics {
  std::uint64_t produced = 0;
  std::uint64_t consumed = 0;
  std::uint64_t dropped = 0;
  std::uint64_t in_queue = 0;
  LatencySummary queue_latency;
  LatencySummary transfer;

  bool stall_alarm(std::uint64_t window) const { return produced > consumed + window; }
};

inline std::int64_t monotonic_ns() {
  return std::chrono::duration_cast<std::chrono::nanoseconds>(
             std::chrono::steady_clock::now().time_since_epoch())
      .count();
}

namespace detail {

struct QueuedFrame {
  Frame frame;
  std::int64_t enqueued_ns;
};

class BoundedFrameQueue {
 public:
  explicit BoundedFrameQueue(std::size_t capacity) : capacity_(capacity) {}

  enum class PushResult { kOk, kTimeout, kClosed };

  PushResult push(Frame f, std::chrono::nanoseconds deadline) {
    std::unique_lock lk(mu_);
    if (!not_full_.wait_for(lk, deadline, [&] { return closed_ || q_.size() < capacity_; }))
      return PushResult::kTimeout;
    if (closed_) return PushResult::kClosed;
    q_.push_back({std::move(f), monotonic_ns()});
    not_empty_.notify_one();
    return PushResult::kOk;
  }

  // Blocks until a frame arrives or the queue is closed and drained.
  std::optional<QueuedFrame> pop() {
    std::unique_lock lk(mu_);
    not_empty_.wait(lk, [&] { return closed_ || !q_.empty(); });
    if (q_.empty()) return std::nullopt;  // closed and drained: end of stream
    QueuedFrame f = std::move(q_.front());
    q_.pop_front();
    not_full_.notify_one();
    return f;
  }

  std::optional<QueuedFrame> try_pop_for(std::chrono::nanoseconds wait) {
    std::unique_lock lk(mu_);
    if (!not_empty_.wait_for(lk, wait, [&] { return closed_ || !q_.empty(); }))
      return std::nullopt;
    if (q_.empty()) return std::nullopt;
    QueuedFrame f = std::move(q_.front());
    q_.pop_front();
    not_full_.notify_one();
    return f;
  }

  std::size_t close() {  // returns frames discarded
    std::unique_lock lk(mu_);
    closed_ = true;
    not_empty_.notify_all();
    not_full_.notify_all();
    return 0;
  }

  std::size_t close_and_discard() {
    std::unique_lock lk(mu_);
    closed_ = true;
    const std::size_t n = q_.size();
    q_.clear();
    not_empty_.notify_all();
    not_full_.notify_all();
    return n;
  }

  bool closed() const {
    std::unique_lock lk(mu_);
    return closed_;
  }
  std::size_t size() const {
    std::unique_lock lk(mu_);
    return q_.size();
  }

 private:
  mutable std::mutex mu_;
  std::condition_variable not_full_, not_empty_;
  std::deque<QueuedFrame> q_;
  std::size_t capacity_;
  bool closed_ = false;
};

}  // namespace detail

class PipeRegistry;

class ConsumerHandle {
 public:
  // Blocks for the next frame; nullopt = end of stream.
  std::optional<Frame> recv();
  std::optional<Frame> recv_for(std::chrono::nanoseconds wait);
  void leave();  // simulate consumer death: queued frames are discarded
  const std::string& job_id() const { return job_id_; }
  std::size_t queue_depth() const { return queue_->size(); }

 private:
  friend class PipeRegistry;
  ConsumerHandle(PipeRegistry* reg, std::string pipe, std::string job, std::size_t id,
                 std::shared_ptr<detail::BoundedFrameQueue> q)
      : registry_(reg), pipe_(std::move(pipe)), job_id_(std::move(job)), id_(id),
        queue_(std::move(q)) {}

  PipeRegistry* registry_;
  std::string pipe_;
  std::string job_id_;
  std::size_t id_;
  std::shared_ptr<detail::BoundedFrameQueue> queue_;
};

class ProducerHandle {
 public:
  // Enqueues one delivery per receiving group (broadcast) or one delivery
  // total (spray); blocks up to the deadline on full queues.
  void send(Frame f);
  void close();
  std::uint64_t next_seq() { return seq_++; }

 private:
  friend class PipeRegistry;
  ProducerHandle(PipeRegistry* reg, std::string pipe) : registry_(reg), pipe_(std::move(pipe)) {}
  PipeRegistry* registry_;
  std::string pipe_;
  std::atomic<std::uint64_t> seq_{0};
};

struct PipeOptions {
  std::size_t queue_capacity = 64;
  std::chrono::nanoseconds send_deadline = std::chrono::seconds(5);
};

// In-process core of the named-pipe data plane. Producers and consumers
// sharing a name are matched; consumers are grouped by job_id. Broadcast
// delivers one copy per job group; within each receiving group frames are
// sprayed round-robin.
class PipeRegistry {
 public:
  explicit PipeRegistry(PipeOptions opt = {}) : opt_(opt) {}

  std::shared_ptr<ProducerHandle> declare_producer(const std::string& name, PipeMode mode) {
    std::unique_lock lk(mu_);
    auto& p = pipes_[name];
    if (p.has_producer) throw ValidationError("producer already declared for pipe '" + name + "'");
    p.has_producer = true;
    p.mode = mode;
    return std::shared_ptr<ProducerHandle>(new ProducerHandle(this, name));
  }

  std::shared_ptr<ConsumerHandle> declare_consumer(const std::string& name,
                                                   const std::string& job_id) {
    std::unique_lock lk(mu_);
    auto& p = pipes_[name];
    auto q = std::make_shared<detail::BoundedFrameQueue>(opt_.queue_capacity);
    const std::size_t id = p.next_consumer_id++;
    p.groups[job_id].members.push_back({id, q, true});
    return std::shared_ptr<ConsumerHandle>(
        new ConsumerHandle(this, name, job_id, id, std::move(q)));
  }

  std::shared_ptr<ProducerHandle> declare(const PipeDecl& decl) {
    if (decl.name.empty() || decl.name.size() > kMaxFrameNameLen)
      throw ValidationError("pipe name must be 1..255 bytes");
    if (decl.role != PipeRole::kProducer)
      throw ValidationError("declare(PipeDecl) overload is for producers");
    return declare_producer(decl.name, decl.mode);
  }

  PipeMetrics metrics(const std::string& name) const {
    std::unique_lock lk(mu_);
    auto it = pipes_.find(name);
    if (it == pipes_.end()) return {};
    PipeMetrics m = it->second.metrics;
    for (const auto& [job, group] : it->second.groups)
      for (const auto& c : group.members)
        if (c.alive) m.in_queue += c.queue->size();
    return m;
  }

  // deliveries handed to this job group and frames its consumers popped
  struct GroupCounters {
    std::uint64_t delivered = 0;
    std::uint64_t consumed = 0;
    std::uint64_t dropped = 0;
    std::uint64_t in_queue = 0;
  };
  GroupCounters group_counters(const std::string& name, const std::string& job_id) const {
    std::unique_lock lk(mu_);
    auto it = pipes_.find(name);
    if (it == pipes_.end()) return {};
    auto git = it->second.groups.find(job_id);
    if (git == it->second.groups.end()) return {};
    GroupCounters g = git->second.counters;
    for (const auto& c : git->second.members)
      if (c.alive) g.in_queue += c.queue->size();
    return g;
  }

 private:
  friend class ProducerHandle;
  friend class ConsumerHandle;

  struct ConsumerSlot {
    std::size_t id;
    std::shared_ptr<detail::BoundedFrameQueue> queue;
    bool alive;
  };
  struct JobGroup {
    std::vector<ConsumerSlot> members;
    std::size_t rr = 0;
    GroupCounters counters;
  };
  struct PipeState {
    bool has_producer = false;
    PipeMode mode = PipeMode::kSpray;
    std::map<std::string, JobGroup> groups;
    std::size_t next_consumer_id = 0;
    PipeMetrics metrics;
    bool closed = false;
  };

  struct Delivery {
    std::shared_ptr<detail::BoundedFrameQueue> queue;
    std::string job_id;
    JobGroup* group;
  };

  void send_frame(const std::string& pipe, Frame f) {
    std::vector<Delivery> targets;
    {
      std::unique_lock lk(mu_);
      auto& p = pipes_.at(pipe);
      if (p.closed) throw PipeClosedError("pipe '" + pipe + "' is closed");
      if (p.mode == PipeMode::kBroadcast) {
        for (auto& [job, group] : p.groups) {
          if (auto* slot = pick_round_robin(group))
            targets.push_back({slot->queue, job, &group});
        }
      } else {
        // spray: one consumer total, round-robin across all jobs' members
        std::vector<std::pair<JobGroup*, ConsumerSlot*>> alive;
        for (auto& [job, group] : p.groups)
          for (auto& c : group.members)
            if (c.alive) alive.push_back({&group, &c});
        if (!alive.empty()) {
          auto& pick = alive[p.metrics.produced % alive.size()];
          std::string job;
          for (auto& [j, g] : p.groups)
            if (&g == pick.first) job = j;
          targets.push_back({pick.second->queue, job, pick.first});
        }
      }
      p.metrics.produced += 1;
    }
    f.sent_at_ns = monotonic_ns();
    std::string stalled_job;
    for (auto& t : targets) {
      const auto start = monotonic_ns();
      auto res = t.queue->push(f, opt_.send_deadline);
      std::unique_lock lk(mu_);
      auto& p = pipes_.at(pipe);
      if (res == detail::BoundedFrameQueue::PushResult::kOk) {
        t.group->counters.delivered += 1;
        p.metrics.transfer.add(monotonic_ns() - start);
      } else if (res == detail::BoundedFrameQueue::PushResult::kTimeout) {
        if (stalled_job.empty()) stalled_job = t.job_id;
      } else {
        // queue closed under us: account the frame as delivered-then-dropped
        // so per-group conservation (delivered = consumed + in_queue + dropped)
        // holds at quiescence
        t.group->counters.delivered += 1;
        t.group->counters.dropped += 1;
        p.metrics.dropped += 1;
      }
    }
    // raised after every other job got its copy, so one stalled job
    // cannot starve its broadcast peers of this frame
    if (!stalled_job.empty()) {
      throw BackpressureTimeoutError(
          "backpressure timeout: job '" + stalled_job + "' stalled on pipe '" + pipe + "'",
          stalled_job);
    }
  }

  ConsumerSlot* pick_round_robin(JobGroup& group) {
    std::size_t alive = 0;
    for (auto& c : group.members)
      if (c.alive) ++alive;
    if (alive == 0) return nullptr;
    std::size_t idx = group.rr++ % alive;
    for (auto& c : group.members) {
      if (!c.alive) continue;
      if (idx == 0) return &c;
      --idx;
    }
    return nullptr;
  }

  void close_pipe(const std::string& pipe) {
    std::unique_lock lk(mu_);
    auto& p = pipes_.at(pipe);
    p.closed = true;
    for (auto& [job, group] : p.groups)
      for (auto& c : group.members) c.queue->close();
  }

  void note_consumed(const std::string& pipe, const std::string& job, std::int64_t latency_ns) {
    std::unique_lock lk(mu_);
    auto& p = pipes_.at(pipe);
    p.metrics.consumed += 1;
    p.metrics.queue_latency.add(latency_ns);
    p.groups[job].counters.consumed += 1;
  }

  void remove_consumer(const std::string& pipe, const std::string& job, std::size_t id) {
    std::unique_lock lk(mu_);
    auto& p = pipes_.at(pipe);
    auto& group = p.groups[job];
    for (auto& c : group.members) {
      if (c.id == id && c.alive) {
        c.alive = false;
        const std::size_t discarded = c.queue->close_and_discard();
        p.metrics.dropped += discarded;
        group.counters.dropped += discarded;
      }
    }
  }

  PipeOptions opt_;
  mutable std::mutex mu_;
  std::map<std::string, PipeState> pipes_;
};

inline void ProducerHandle::send(Frame f) { registry_->send_frame(pipe_, std::move(f)); }
inline void ProducerHandle::close() { registry_->close_pipe(pipe_); }

inline std::optional<Frame> ConsumerHandle::recv() {
  auto qf = queue_->pop();
  if (!qf) return std::nullopt;
  registry_->note_consumed(pipe_, job_id_, monotonic_ns() - qf->enqueued_ns);
  return std::move(qf->frame);
}

inline std::optional<Frame> ConsumerHandle::recv_for(std::chrono::nanoseconds wait) {
  auto qf = queue_->try_pop_for(wait);
  if (!qf) return std::nullopt;
  registry_->note_consumed(pipe_, job_id_, monotonic_ns() - qf->enqueued_ns);
  return std::move(qf->frame);
}

inline void ConsumerHandle::leave() { registry_->remove_consumer(pipe_, job_id_, id_); }

// --- chunked staging-copy / send overlap -------------------------------

struct TransferReport {
  double pipelined_s = 0;
  double store_and_forward_s = 0;
  std::size_t chunks = 0;
};

// Analytic pipeline recurrence: the staging copy of chunk k+1 runs
// concurrently with the transmission of chunk k.
inline TransferReport pipelined_transfer_model(std::size_t chunks, double copy_s_per_chunk,
                                               double send_s_per_chunk) {
  if (chunks == 0) throw ValidationError("chunks must be >= 1");
  TransferReport r;
  r.chunks = chunks;
  double copy_done = 0, send_done = 0;
  for (std::size_t k = 0; k < chunks; ++k) {
    copy_done += copy_s_per_chunk;
    send_done = std::max(send_done, copy_done) + send_s_per_chunk;
  }
  r.pipelined_s = send_done;
  r.store_and_forward_s = static_cast<double>(chunks) * (copy_s_per_chunk + send_s_per_chunk);
  return r;
}

// Measured variant: staging memcpy overlapped with handing chunks to a
// consumer thread, versus copy-everything-then-send.
inline TransferReport pipelined_transfer(const std::vector<std::uint8_t>& payload,
                                         std::size_t chunk_size) {
  if (chunk_size == 0) throw ValidationError("chunk_size must be > 0");
  const std::size_t n = (payload.size() + chunk_size - 1) / chunk_size;
  TransferReport r;
  r.chunks = n;

  std::vector<std::uint8_t> staging(payload.size());
  std::vector<std::uint8_t> sink(payload.size());

  auto consume_chunk = [&](std::size_t k) {
    const std::size_t off = k * chunk_size;
    const std::size_t len = std::min(chunk_size, payload.size() - off);
    std::memcpy(sink.data() + off, staging.data() + off, len);
  };

  {  // pipelined: copier thread stages, main thread "sends"
    std::mutex mu;
    std::condition_variable cv;
    std::size_t staged = 0;
    const auto t0 = std::chrono::steady_clock::now();
    std::thread copier([&] {
      for (std::size_t k = 0; k < n; ++k) {
        const std::size_t off = k * chunk_size;
        const std::size_t len = std::min(chunk_size, payload.size() - off);
        std::memcpy(staging.data() + off, payload.data() + off, len);
        {
          std::lock_guard lk(mu);
          staged = k + 1;
        }
        cv.notify_one();
      }
    });
    for (std::size_t k = 0; k < n; ++k) {
      std::unique_lock lk(mu);
      cv.wait(lk, [&] { return staged > k; });
      lk.unlock();
      consume_chunk(k);
    }
    copier.join();
    r.pipelined_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  }

  {  // store-and-forward: stage everything, then send everything
    const auto t0 = std::chrono::steady_clock::now();
    std::memcpy(staging.data(), payload.data(), payload.size());
    for (std::size_t k = 0; k < n; ++k) consume_chunk(k);
    r.store_and_forward_s =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  }
  return r;
}

}  // namespace ditforge
