#include <gtest/gtest.h>

#include <algorithm>
#include <map>
#include <random>

#include "npusim/noc.h"

namespace npusim {
namespace {

MemoryRequest pkt(uint64_t id, uint32_t core = 0) {
  MemoryRequest r;
  r.id = id;
  r.core_id = core;
  return r;
}

NocConfig simple_cfg(uint32_t latency, uint32_t bw) {
  NocConfig cfg;
  cfg.model = NocModel::kSimple;
  cfg.latency_cycles = latency;
  cfg.bytes_per_cycle = bw;
  return cfg;
}

auto always = [](uint32_t) { return true; };
auto none = [](uint32_t) {};

TEST(SimpleTransit, CommandOnIdleLink) {
  NocConfig cfg = simple_cfg(8, 8);
  Cycle link_free = 0;
  EXPECT_EQ(SimpleNoc::transit(100, 0, link_free, cfg), 108u);
}

TEST(SimpleTransit, SerializesPayloads) {
  NocConfig cfg = simple_cfg(8, 8);
  Cycle link_free = 0;
  const Cycle a = SimpleNoc::transit(10, 64, link_free, cfg);
  const Cycle b = SimpleNoc::transit(10, 64, link_free, cfg);
  EXPECT_EQ(a, 18u);
  EXPECT_EQ(b, a + 8);
  EXPECT_EQ(link_free, 26u);
}

TEST(SimpleTransit, NoTrafficLeavesLinksUntouched) {
  SimConfig cfg = mobile_preset();
  cfg.noc = simple_cfg(8, 8);
  MemorySystem mem(cfg.dram);
  SimpleNoc noc(cfg, mem);
  for (Cycle c = 0; c < 100; ++c) {
    noc.forward(c);
    EXPECT_TRUE(noc.deliver_responses(c).empty());
  }
  EXPECT_TRUE(noc.idle());
  EXPECT_EQ(noc.next_event(0), kNever);
  EXPECT_EQ(noc.stats().bytes, 0u);
}

TEST(SimpleTransit, BytesPerLinkBoundedByBandwidth) {
  SimConfig cfg = mobile_preset();
  cfg.noc = simple_cfg(4, 16);
  MemorySystem mem(cfg.dram);
  SimpleNoc noc(cfg, mem);
  for (uint64_t i = 0; i < 100; ++i) {
    MemoryRequest r = pkt(i);
    r.is_write = true;
    noc.inject_request(r, 0);
  }
  // Arrivals are spread at one packet per 64/16 cycles.
  uint64_t enqueued_by_40 = 0;
  for (Cycle c = 0; c <= 40; ++c) {
    noc.forward(c);
    enqueued_by_40 = mem.enqueued();
  }
  EXPECT_LE(enqueued_by_40 * 64, 16u * 40);
}

TEST(Flits, HeaderPlusPayload) {
  NocConfig cfg;
  EXPECT_EQ(flits_for(64, cfg), 9u);
  EXPECT_EQ(flits_for(0, cfg), 1u);
  EXPECT_EQ(flits_for(1, cfg), 2u);
}

TEST(CrossbarCycle, SingleInputMovesOneFlitPerCycle) {
  Crossbar xb(1, 1);
  xb.inject(0, 0, pkt(1), 9);
  std::vector<std::pair<uint32_t, MemoryRequest>> out;
  for (uint64_t c = 0; c < 9; ++c) {
    xb.step(c, always, none, out);
    EXPECT_EQ(xb.flits_moved(), c + 1);
    EXPECT_TRUE(out.empty());
  }
  xb.step(9, always, none, out);
  ASSERT_EQ(out.size(), 1u);
  EXPECT_EQ(out[0].second.id, 1u);
  EXPECT_TRUE(xb.idle());
}

TEST(CrossbarCycle, TwoInputsAlternate) {
  Crossbar xb(2, 1);
  for (uint64_t i = 0; i < 4; ++i) {
    xb.inject(0, 0, pkt(i, 0), 9);
    xb.inject(1, 0, pkt(100 + i, 1), 9);
  }
  std::vector<std::pair<uint32_t, MemoryRequest>> out;
  for (uint64_t c = 0; c < 200 && !xb.idle(); ++c) xb.step(c, always, none, out);
  ASSERT_EQ(out.size(), 8u);
  for (size_t k = 0; k < out.size(); ++k) EXPECT_EQ(out[k].second.core_id, k % 2) << k;
  // Each request sees about twice the serialization of a lone sender.
  EXPECT_EQ(xb.flits_moved(), 72u);
}

TEST(CrossbarCycle, BlockedOutputGrantsNothing) {
  Crossbar xb(1, 1);
  xb.inject(0, 0, pkt(1), 2);
  std::vector<std::pair<uint32_t, MemoryRequest>> out;
  auto blocked = [](uint32_t) { return false; };
  xb.step(0, blocked, none, out);
  EXPECT_EQ(xb.flits_moved(), 0u);
  xb.step(1, always, none, out);
  EXPECT_EQ(xb.flits_moved(), 1u);
}

TEST(CrossbarCycle, IndependentOutputsMoveInParallel) {
  Crossbar xb(2, 2);
  xb.inject(0, 0, pkt(1, 0), 4);
  xb.inject(1, 1, pkt(2, 1), 4);
  std::vector<std::pair<uint32_t, MemoryRequest>> out;
  for (uint64_t c = 0; c < 4; ++c) xb.step(c, always, none, out);
  EXPECT_EQ(xb.flits_moved(), 8u);
}

TEST(CrossbarCycle, FairUnderContinuousContention) {
  Crossbar xb(3, 1);
  std::mt19937 rng(3);
  for (uint64_t i = 0; i < 300; ++i) xb.inject(i % 3, 0, pkt(i, i % 3), 1 + rng() % 9);
  std::vector<std::pair<uint32_t, MemoryRequest>> out;
  // Window while all three inputs still have packets waiting.
  for (uint64_t c = 0; c < 600; ++c) {
    xb.step(c, always, none, out);
    const auto g = xb.grants_per_input();
    const auto [lo, hi] = std::minmax_element(g.begin(), g.end());
    ASSERT_LE(*hi - *lo, 1u) << "cycle " << c;
  }
}

TEST(CrossbarCycle, PerPairFifoOrder) {
  Crossbar xb(2, 2);
  for (uint64_t i = 0; i < 20; ++i) xb.inject(i % 2, (i / 2) % 2, pkt(i, i % 2), 1 + i % 5);
  std::vector<std::pair<uint32_t, MemoryRequest>> out;
  for (uint64_t c = 0; c < 500 && !xb.idle(); ++c) xb.step(c, always, none, out);
  ASSERT_EQ(out.size(), 20u);
  std::map<std::pair<uint32_t, uint32_t>, uint64_t> last;
  for (const auto& [o, r] : out) {
    auto key = std::make_pair(r.core_id, o);
    if (last.count(key)) EXPECT_GT(r.id, last[key]);
    last[key] = r.id;
  }
}

TEST(CrossbarNocTest, ReadRoundTrip) {
  SimConfig cfg = mobile_preset();
  cfg.noc.clock_hz = cfg.core.clock_hz;
  MemorySystem mem(cfg.dram);
  CrossbarNoc noc(cfg, mem);
  MemoryRequest r = pkt(7, 2);
  noc.inject_request(r, 0);
  std::vector<MemoryRequest> got;
  for (Cycle c = 0; c < 2000 && got.empty(); ++c) {
    noc.forward(c);
    mem.advance_to(convert_cycles_floor(c, cfg.core.clock_hz, cfg.dram.dram_clock_hz));
    for (auto& resp : mem.take_read_responses()) noc.inject_response(resp, c);
    for (auto& d : noc.deliver_responses(c)) got.push_back(d);
  }
  ASSERT_EQ(got.size(), 1u);
  EXPECT_EQ(got[0].id, 7u);
  EXPECT_EQ(got[0].core_id, 2u);
  EXPECT_TRUE(noc.idle());
  EXPECT_EQ(noc.stats().request_packets, 1u);
  EXPECT_EQ(noc.stats().response_packets, 1u);
  EXPECT_EQ(noc.stats().flits, 1u + 9u);  // header-only command, header + 64 B data
}

TEST(CrossbarNocTest, ControllerBackpressureHoldsRequests) {
  SimConfig cfg = mobile_preset();
  cfg.noc.clock_hz = cfg.core.clock_hz;
  cfg.dram.channels = 1;
  cfg.noc.output_ports = 1;
  cfg.dram.queue_capacity = 2;
  MemorySystem mem(cfg.dram);
  CrossbarNoc noc(cfg, mem);
  for (uint64_t i = 0; i < 6; ++i) noc.inject_request(pkt(i, i % 4), 0);
  for (Cycle c = 0; c < 20; ++c) {
    noc.forward(c);
    EXPECT_LE(mem.channel(0).queued(), 2u);
  }
  EXPECT_EQ(mem.enqueued(), 2u);
  EXPECT_FALSE(noc.idle());
}

}  // namespace
}  // namespace npusim
