#include <gtest/gtest.h>

#include <map>
#include <random>
#include <set>

#include "npusim/dram.h"

namespace npusim {
namespace {

DramConfig one_channel() {
  DramConfig cfg;  // DDR4-like timing at a 1 GHz DRAM clock
  cfg.channels = 1;
  return cfg;
}

MemoryRequest read_at(Addr addr, uint64_t id = 0) {
  MemoryRequest r;
  r.id = id;
  r.addr = addr;
  return r;
}

// Feeds `addrs` into the memory system as fast as queues accept them and
// returns completed requests in completion order.
std::vector<MemoryRequest> drive(MemorySystem& mem, const std::vector<Addr>& addrs, bool write = false,
                                 uint64_t* end_cycle = nullptr) {
  std::vector<MemoryRequest> done;
  mem.set_completion_hook([&](const MemoryRequest& r) { done.push_back(r); });
  size_t next = 0;
  uint64_t now = 0;
  for (; now < 10'000'000; ++now) {
    mem.advance_to(now);
    while (next < addrs.size() && mem.can_accept(mem.channel_of(addrs[next]))) {
      MemoryRequest r = read_at(addrs[next], next);
      r.is_write = write;
      mem.enqueue(r);
      ++next;
    }
    mem.take_read_responses();
    mem.take_write_acks();
    if (next == addrs.size() && mem.idle()) break;
  }
  if (end_cycle) *end_cycle = now;
  return done;
}

TEST(Ipoly, SingleChannelAlwaysZero) {
  DramConfig cfg = one_channel();
  for (Addr a = 0; a < 1 << 20; a += 4096 + 64) EXPECT_EQ(ipoly_channel(a, cfg), 0u);
}

TEST(Ipoly, AlignedWindowIsPermutation) {
  for (unsigned k = 1; k <= 6; ++k) {
    const uint64_t n = uint64_t{1} << k;
    for (uint64_t window = 0; window < 256; ++window) {
      std::set<uint32_t> seen;
      for (uint64_t b = window * n; b < (window + 1) * n; ++b) seen.insert(ipoly_hash(b, k));
      ASSERT_EQ(seen.size(), n) << "k=" << k << " window=" << window;
    }
  }
}

TEST(Ipoly, StridedStreamSpreads) {
  DramConfig cfg;
  cfg.channels = 16;
  std::map<uint32_t, int> hits;
  for (uint64_t i = 0; i < 4096; ++i) ++hits[ipoly_channel(i * cfg.channels * cfg.access_bytes, cfg)];
  int max_hits = 0;
  for (const auto& [c, h] : hits) max_hits = std::max(max_hits, h);
  EXPECT_LT(max_hits, 4096 / 2);
}

TEST(Ipoly, NonPowerOfTwoRejected) {
  DramConfig cfg;
  cfg.channels = 3;
  EXPECT_THROW(ipoly_channel(0, cfg), SimError);
}

TEST(Enqueue, SingleRequestQueued) {
  DramConfig cfg = one_channel();
  DramChannel ch(0, cfg);
  ch.enqueue(read_at(0), 0);
  EXPECT_EQ(ch.queued(), 1u);
}

TEST(Enqueue, FullQueueSignalsBackpressure) {
  DramConfig cfg = one_channel();
  cfg.queue_capacity = 4;
  MemorySystem mem(cfg);
  for (int i = 0; i < 4; ++i) mem.enqueue(read_at(i * 64));
  EXPECT_FALSE(mem.can_accept(0));
  mem.advance_to(200);
  EXPECT_TRUE(mem.can_accept(0));
}

TEST(Enqueue, DifferentChannelsDifferentQueues) {
  DramConfig cfg;
  cfg.channels = 2;
  MemorySystem mem(cfg);
  mem.enqueue(read_at(0));
  mem.enqueue(read_at(64));
  EXPECT_NE(mem.channel_of(0), mem.channel_of(64));
  EXPECT_EQ(mem.channel(0).queued(), 1u);
  EXPECT_EQ(mem.channel(1).queued(), 1u);
}

TEST(Timing, ClosedBankRead) {
  DramConfig cfg = one_channel();
  MemorySystem mem(cfg);
  auto done = drive(mem, {0});
  ASSERT_EQ(done.size(), 1u);
  EXPECT_EQ(done[0].row_outcome, RowOutcome::kClosed);
  EXPECT_EQ(done[0].dram_done - done[0].dram_arrival, 22u + 22u + cfg.burst_cycles());
}

TEST(Timing, OpenRowHitSkipsActivate) {
  DramConfig cfg = one_channel();
  MemorySystem mem(cfg);
  std::vector<MemoryRequest> done;
  mem.set_completion_hook([&](const MemoryRequest& r) { done.push_back(r); });
  mem.enqueue(read_at(0));
  mem.advance_to(100);
  mem.enqueue(read_at(64));
  mem.advance_to(300);
  ASSERT_EQ(done.size(), 2u);
  EXPECT_EQ(done[1].row_outcome, RowOutcome::kHit);
  EXPECT_EQ(done[1].dram_done - done[1].dram_arrival, 22u + cfg.burst_cycles());
  EXPECT_LT(done[1].dram_done - done[1].dram_arrival, done[0].dram_done - done[0].dram_arrival);
}

TEST(Timing, RowConflictWaitsForRasThenPrechargeActivate) {
  DramConfig cfg = one_channel();
  MemorySystem mem(cfg);
  std::vector<DramCommand> log;
  mem.set_command_log(&log);
  std::vector<MemoryRequest> done;
  mem.set_completion_hook([&](const MemoryRequest& r) { done.push_back(r); });
  const Addr other_row = cfg.row_bytes * cfg.banks_per_channel;  // bank 0, row 1
  ASSERT_EQ(map_address(other_row, cfg).bank, 0u);
  ASSERT_EQ(map_address(other_row, cfg).row, 1u);
  mem.enqueue(read_at(0, 1));
  mem.advance_to(1);
  mem.enqueue(read_at(other_row, 2));
  mem.advance_to(400);
  ASSERT_EQ(done.size(), 2u);
  EXPECT_EQ(done[1].row_outcome, RowOutcome::kConflict);
  uint64_t act0 = 0, pre = 0, act1 = 0, col1 = 0;
  for (const auto& c : log) {
    if (c.kind == DramCommandKind::kActivate && c.request_id == 1) act0 = c.cycle;
    if (c.kind == DramCommandKind::kPrecharge) pre = c.cycle;
    if (c.kind == DramCommandKind::kActivate && c.request_id == 2) act1 = c.cycle;
    if (c.kind == DramCommandKind::kRead && c.request_id == 2) col1 = c.cycle;
  }
  EXPECT_EQ(pre, act0 + 56);  // tRAS
  EXPECT_EQ(act1, pre + 22);  // tRP
  EXPECT_EQ(col1, act1 + 22);  // tRCD
  EXPECT_EQ(done[1].dram_done, col1 + 22 + cfg.burst_cycles());
  EXPECT_GE(done[1].dram_done - done[1].dram_arrival, analytic_min_latency(RowOutcome::kConflict, cfg));
}

TEST(Timing, FrFcfsServesHitsBeforeOlderMiss) {
  DramConfig cfg = one_channel();
  MemorySystem mem(cfg);
  std::vector<MemoryRequest> done;
  mem.set_completion_hook([&](const MemoryRequest& r) { done.push_back(r); });
  const Addr other_row = cfg.row_bytes * cfg.banks_per_channel;
  mem.enqueue(read_at(0, 1));
  mem.advance_to(30);  // row 0 open
  mem.enqueue(read_at(other_row, 2));
  mem.enqueue(read_at(64, 3));
  mem.advance_to(1000);
  ASSERT_EQ(done.size(), 3u);
  EXPECT_EQ(done[1].id, 3u);
  EXPECT_EQ(done[2].id, 2u);
}

TEST(Timing, StarvedRequestOverridesHits) {
  DramConfig cfg = one_channel();
  cfg.starvation_age = 100;
  cfg.queue_capacity = 64;
  MemorySystem mem(cfg);
  std::vector<MemoryRequest> done;
  mem.set_completion_hook([&](const MemoryRequest& r) { done.push_back(r); });
  const Addr other_row = cfg.row_bytes * cfg.banks_per_channel;
  mem.enqueue(read_at(0, 0));
  mem.advance_to(30);
  mem.enqueue(read_at(other_row, 1));
  // A steady stream of hits to the open row.
  uint64_t id = 2;
  for (uint64_t c = 31; c < 2000; ++c) {
    if (c % 6 == 0 && mem.can_accept(0)) mem.enqueue(read_at((id % 128) * 64, id++));
    mem.advance_to(c);
  }
  bool served = false;
  for (const auto& r : done) {
    if (r.id == 1) {
      served = true;
      EXPECT_LT(r.dram_done - r.dram_arrival, 100u + 200u);
    }
  }
  EXPECT_TRUE(served);
}

TEST(Timing, EveryRequestMeetsItsFloor) {
  DramConfig cfg;
  cfg.channels = 4;
  MemorySystem mem(cfg);
  std::mt19937_64 rng(7);
  std::vector<Addr> addrs;
  for (int i = 0; i < 4000; ++i) addrs.push_back((rng() % (1u << 26)) / 64 * 64);
  auto done = drive(mem, addrs);
  ASSERT_EQ(done.size(), addrs.size());
  for (const auto& r : done) {
    EXPECT_GE(r.dram_done - r.dram_arrival, analytic_min_latency(r.row_outcome, cfg));
  }
  EXPECT_EQ(mem.enqueued(), mem.completed());
}

TEST(Bandwidth, IdleWindowIsZero) { EXPECT_EQ(bandwidth_stats(0, 1000, DramConfig{}).utilization, 0.0); }

TEST(Bandwidth, OneOfTwoChannelsSaturated) {
  DramConfig cfg;
  cfg.channels = 2;
  cfg.peak_bytes_per_cycle = 16;
  EXPECT_DOUBLE_EQ(bandwidth_stats(16 * 1000, 1000, cfg).utilization, 0.5);
}

TEST(Bandwidth, SequentialStreamBeatsRandomRows) {
  DramConfig cfg = one_channel();
  std::vector<Addr> seq, rnd;
  std::mt19937_64 rng(11);
  for (uint64_t i = 0; i < 8192; ++i) {
    seq.push_back(i * 64);
    rnd.push_back((rng() % (1u << 28)) / 64 * 64);
  }
  MemorySystem a(cfg), b(cfg);
  uint64_t seq_end = 0, rnd_end = 0;
  drive(a, seq, false, &seq_end);
  drive(b, rnd, false, &rnd_end);
  const double seq_util = bandwidth_stats(a.total_bytes(), seq_end, cfg).utilization;
  const double rnd_util = bandwidth_stats(b.total_bytes(), rnd_end, cfg).utilization;
  EXPECT_GE(seq_util, 0.8);
  EXPECT_LT(rnd_util, seq_util);
}

TEST(Memory, WritesAckedOnEnqueue) {
  DramConfig cfg = one_channel();
  MemorySystem mem(cfg);
  MemoryRequest w = read_at(0);
  w.is_write = true;
  mem.enqueue(w);
  EXPECT_EQ(mem.take_write_acks().size(), 1u);
  mem.advance_to(200);
  EXPECT_TRUE(mem.take_read_responses().empty());
  EXPECT_EQ(mem.completed(), 1u);
}

TEST(Memory, AdvanceSkipsQuietCyclesIdentically) {
  DramConfig cfg;
  cfg.channels = 2;
  std::vector<Addr> addrs;
  for (int i = 0; i < 64; ++i) addrs.push_back(i * 4096 + (i % 3) * 64);
  MemorySystem a(cfg), b(cfg);
  std::vector<MemoryRequest> da, db;
  a.set_completion_hook([&](const MemoryRequest& r) { da.push_back(r); });
  b.set_completion_hook([&](const MemoryRequest& r) { db.push_back(r); });
  for (size_t i = 0; i < addrs.size(); ++i) {
    a.enqueue(read_at(addrs[i], i));
    b.enqueue(read_at(addrs[i], i));
    if (a.channel(a.channel_of(addrs[i])).queued() >= cfg.queue_capacity - 1) break;
  }
  for (uint64_t c = 0; c <= 5000; ++c) a.advance_to(c);
  b.advance_to(5000);
  ASSERT_EQ(da.size(), db.size());
  for (size_t i = 0; i < da.size(); ++i) {
    EXPECT_EQ(da[i].id, db[i].id);
    EXPECT_EQ(da[i].dram_done, db[i].dram_done);
  }
}

}  // namespace
}  // namespace npusim
