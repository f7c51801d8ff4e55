#include <gtest/gtest.h>

#include <functional>
#include <map>

#include "npusim/core.h"

namespace npusim {
namespace {

ErrorCode code_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const SimError& e) {
    return e.code();
  }
  ADD_FAILURE() << "expected SimError";
  return ErrorCode::kConsistency;
}

Instruction instr(Opcode op, uint32_t rows, uint32_t cols, std::vector<uint32_t> deps = {}, uint32_t tag = 0) {
  Instruction in;
  in.opcode = op;
  in.rows = rows;
  in.cols = cols;
  in.elem_bytes = 2;
  in.deps = std::move(deps);
  in.weight_tag = tag;
  if (is_dma(op)) {
    in.dram_addr = 0;
    in.dram_stride = uint64_t{cols} * 2;
  }
  return in;
}

Instruction vec(uint32_t elements, std::vector<uint32_t> deps = {}) {
  Instruction in = instr(Opcode::kVector, 1, elements, std::move(deps));
  in.vector_kind = VectorKind::kAdd;
  return in;
}

std::shared_ptr<const TileProgram> tile(uint64_t id, std::vector<Instruction> instrs, uint64_t spm = 1024) {
  auto t = std::make_shared<TileProgram>();
  t->id = id;
  t->owner_node = "n";
  t->instrs = std::move(instrs);
  t->spm_bytes = spm;
  return t;
}

// Records issue/retire cycles per (tile, instruction).
struct Recorder : CoreObserver {
  std::map<std::pair<uint64_t, uint32_t>, Cycle> issued, retired;
  void on_issue(uint32_t, const TileProgram& t, uint32_t i, Cycle now) override { issued[{t.id, i}] = now; }
  void on_retire(uint32_t, const TileProgram& t, uint32_t i, Cycle now) override { retired[{t.id, i}] = now; }
};

// Runs the core alone; memory requests complete `mem_latency` cycles after
// they leave the core. Returns the cycle the last tile completed.
Cycle run(Core& core, Cycle mem_latency = 10, Cycle start = 0, Cycle limit = 100000) {
  std::multimap<Cycle, MemoryRequest> pending;
  Cycle last = start;
  for (Cycle now = start; now < limit; ++now) {
    for (auto it = pending.begin(); it != pending.end() && it->first <= now;) {
      core.deliver(it->second);
      it = pending.erase(it);
    }
    core.cycle(now);
    for (auto& r : core.take_requests()) pending.emplace(now + mem_latency, r);
    if (!core.take_completed().empty()) last = now;
    if (core.idle() && pending.empty()) return last;
  }
  ADD_FAILURE() << "core did not drain";
  return last;
}

TEST(Latency, SystolicFormula) {
  CoreConfig small = SimConfig{}.core;
  EXPECT_EQ(systolic_compute_latency(8, small), 23u);
  EXPECT_EQ(systolic_compute_latency(1, small), 16u);
  CoreConfig big = small;
  big.array_h = big.array_w = 128;
  EXPECT_EQ(systolic_compute_latency(128, big), 383u);
}

TEST(Latency, Preload) {
  CoreConfig c = SimConfig{}.core;
  EXPECT_EQ(preload_latency(8, c), 8u);
  EXPECT_EQ(preload_latency(1, c), 1u);
  EXPECT_EQ(code_of([&] { preload_latency(9, c); }), ErrorCode::kBlockTooTall);
}

TEST(Latency, VectorUnit) {
  SimConfig cfg;
  cfg.op_latency = {{VectorKind::kAdd, 1}, {VectorKind::kGelu, 4}};
  EXPECT_EQ(vector_latency(128, VectorKind::kAdd, cfg.core, cfg.op_latency), 1u);
  EXPECT_EQ(vector_latency(1024, VectorKind::kGelu, cfg.core, cfg.op_latency), 11u);
  EXPECT_EQ(code_of([&] { vector_latency(8, VectorKind::kSoftmax, cfg.core, cfg.op_latency); }),
            ErrorCode::kMissingLatencyConfig);
}

TEST(DmaSplit, AlignedTransfer) {
  Instruction in = instr(Opcode::kMvin, 1, 128);
  auto reqs = dma_split(in, 64);
  ASSERT_EQ(reqs.size(), 4u);
  for (size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(reqs[i].addr, i * 64);
    EXPECT_FALSE(reqs[i].is_write);
  }
}

TEST(DmaSplit, UnalignedCover) {
  Instruction in = instr(Opcode::kMvin, 1, 50);
  in.dram_addr = 32;
  auto reqs = dma_split(in, 64);
  ASSERT_EQ(reqs.size(), 3u);
  EXPECT_EQ(reqs[0].addr, 0u);
  EXPECT_EQ(reqs[1].addr, 64u);
  EXPECT_EQ(reqs[2].addr, 128u);
}

TEST(DmaSplit, ZeroSizeIsEmpty) {
  Instruction in = instr(Opcode::kMvout, 0, 0);
  EXPECT_TRUE(dma_split(in, 64).empty());
}

TEST(DmaSplit, StridedRowsAreCoveredPerRow) {
  Instruction in = instr(Opcode::kMvin, 2, 8);  // 16 B rows, 512 B apart
  in.dram_stride = 512;
  auto reqs = dma_split(in, 64);
  ASSERT_EQ(reqs.size(), 2u);
  EXPECT_EQ(reqs[1].addr, 512u);
}

TEST(Core, PreResidentTileTakesPreloadPlusCompute) {
  SimConfig cfg;
  Core core(0, cfg);
  core.accept_tile(tile(1, {instr(Opcode::kGemmPreload, 8, 8), instr(Opcode::kGemm, 8, 8, {0})}), 0);
  // Accepted at cycle 0, first issue at cycle 0: 8 preload + 23 compute.
  EXPECT_EQ(run(core), 31u);
}

TEST(Core, CanAcceptTile) {
  SimConfig cfg;
  Core core(0, cfg);
  auto a = tile(1, {instr(Opcode::kMvin, 1, 32), instr(Opcode::kMvout, 1, 32, {0})});
  EXPECT_TRUE(core.can_accept_tile(*a));
  core.accept_tile(a, 0);
  auto b = tile(2, {instr(Opcode::kMvin, 1, 32)});
  EXPECT_TRUE(core.can_accept_tile(*b));
  core.accept_tile(b, 0);
  EXPECT_FALSE(core.can_accept_tile(*tile(3, {instr(Opcode::kMvin, 1, 32)})));
  auto huge = tile(4, {instr(Opcode::kMvin, 1, 32)}, cfg.core.spm_partition_bytes() + 1);
  Core fresh(1, cfg);
  EXPECT_FALSE(fresh.can_accept_tile(*huge));
}

TEST(Core, SlotFreeWhileMvoutInFlight) {
  SimConfig cfg;
  Core core(0, cfg);
  core.accept_tile(tile(1, {instr(Opcode::kMvout, 1, 32)}), 0);
  core.cycle(0);
  ASSERT_EQ(core.take_requests().size(), 1u);  // MVOUT issued, response outstanding
  EXPECT_FALSE(core.has_issuing_tile());
  EXPECT_TRUE(core.can_accept_tile(*tile(2, {instr(Opcode::kMvin, 1, 32)})));
}

TEST(Core, PreloadIssuesOnceMvinDone) {
  SimConfig cfg;
  Core core(0, cfg);
  Recorder rec;
  core.set_observer(&rec);
  core.accept_tile(tile(1, {instr(Opcode::kMvin, 8, 8), instr(Opcode::kGemmPreload, 8, 8, {0}),
                            instr(Opcode::kGemm, 8, 8, {1})}),
                   0);
  run(core, 10);
  // 8 rows of 16 B, one 64 B request each.
  const Cycle mvin_done = rec.retired.at({1, 0});
  EXPECT_EQ(rec.issued.at({1, 1}), mvin_done);
  EXPECT_EQ(rec.issued.at({1, 2}), mvin_done + 8);
  EXPECT_EQ(rec.retired.at({1, 2}), mvin_done + 8 + 23);
}

TEST(Core, GemmWaitsForItsWeights) {
  SimConfig cfg;
  Core core(0, cfg);
  Recorder rec;
  core.set_observer(&rec);
  // Two weight blocks; the second GEMM must follow the second PRELOAD.
  core.accept_tile(tile(1, {instr(Opcode::kGemmPreload, 8, 8, {}, 0), instr(Opcode::kGemm, 4, 8, {0}, 0),
                            instr(Opcode::kGemmPreload, 8, 8, {}, 1), instr(Opcode::kGemm, 4, 8, {2}, 1)}),
                   0);
  run(core);
  EXPECT_LT(rec.issued.at({1, 1}), rec.issued.at({1, 2}));
  EXPECT_GE(rec.issued.at({1, 3}), rec.retired.at({1, 2}));
}

TEST(Core, WrongTagGemmDoesNotIssue) {
  SimConfig cfg;
  Core core(0, cfg);
  Recorder rec;
  core.set_observer(&rec);
  core.accept_tile(tile(1, {instr(Opcode::kGemmPreload, 8, 8, {}, 0), instr(Opcode::kGemm, 4, 8, {0}, 7)}), 0);
  for (Cycle c = 0; c < 100; ++c) core.cycle(c);
  EXPECT_EQ(rec.issued.count({1, 1}), 0u);
}

TEST(Core, VectorUnitServesOlderTileFirst) {
  SimConfig cfg;
  cfg.op_latency = {{VectorKind::kAdd, 5}};
  Core core(0, cfg);
  Recorder rec;
  core.set_observer(&rec);
  core.accept_tile(tile(1, {vec(64)}), 0);
  core.accept_tile(tile(2, {vec(64)}), 0);
  run(core);
  EXPECT_EQ(rec.issued.at({1, 0}), 0u);
  EXPECT_EQ(rec.issued.at({2, 0}), 5u);
}

TEST(Core, GemmDoneReleasesMvoutNextCall) {
  SimConfig cfg;
  Core core(0, cfg);
  Recorder rec;
  core.set_observer(&rec);
  core.accept_tile(tile(1, {instr(Opcode::kGemmPreload, 8, 8), instr(Opcode::kGemm, 8, 8, {0}),
                            instr(Opcode::kMvout, 8, 8, {1})}),
                   0);
  run(core);
  EXPECT_EQ(rec.retired.at({1, 1}), 31u);
  EXPECT_EQ(rec.issued.at({1, 2}), 31u);
}

TEST(Core, LastMvinResponseRetiresSameCycle) {
  SimConfig cfg;
  Core core(0, cfg);
  Recorder rec;
  core.set_observer(&rec);
  core.accept_tile(tile(1, {instr(Opcode::kMvin, 1, 64)}), 0);  // 128 B: two requests
  core.cycle(0);
  auto reqs = core.take_requests();
  core.cycle(1);
  auto more = core.take_requests();
  reqs.insert(reqs.end(), more.begin(), more.end());
  ASSERT_EQ(reqs.size(), 2u);
  core.deliver(reqs[0]);
  core.cycle(20);
  EXPECT_EQ(rec.retired.count({1, 0}), 0u);
  core.deliver(reqs[1]);
  core.cycle(21);
  EXPECT_EQ(rec.retired.at({1, 0}), 21u);
}

TEST(Core, ResponseForRetiredTileIsFatal) {
  SimConfig cfg;
  Core core(0, cfg);
  core.accept_tile(tile(1, {instr(Opcode::kMvin, 1, 32)}), 0);
  core.cycle(0);
  auto reqs = core.take_requests();
  ASSERT_EQ(reqs.size(), 1u);
  core.deliver(reqs[0]);
  core.cycle(5);
  ASSERT_TRUE(core.idle());
  core.deliver(reqs[0]);
  EXPECT_EQ(code_of([&] { core.cycle(6); }), ErrorCode::kConsistency);
}

TEST(Core, DoubleBufferingOverlapsLoadsWithCompute) {
  SimConfig cfg;
  Core core(0, cfg);
  Recorder rec;
  core.set_observer(&rec);
  auto make = [](uint64_t id) {
    return tile(id, {instr(Opcode::kMvin, 1, 32), instr(Opcode::kGemmPreload, 8, 8, {0}), instr(Opcode::kGemm, 64, 8, {1})});
  };
  core.accept_tile(make(1), 0);
  core.accept_tile(make(2), 0);
  run(core, 5);
  // Tile 2's load finishes while tile 1 computes.
  EXPECT_LT(rec.retired.at({2, 0}), rec.retired.at({1, 2}));
  EXPECT_EQ(rec.issued.at({2, 1}), rec.retired.at({1, 2}));
}

TEST(Core, NextEventSkipsIdleSpan) {
  SimConfig cfg;
  Core core(0, cfg);
  core.accept_tile(tile(1, {instr(Opcode::kGemmPreload, 8, 8), instr(Opcode::kGemm, 8, 8, {0})}), 0);
  core.cycle(0);
  EXPECT_EQ(core.next_event(0), 1u);  // state changed this cycle
  core.cycle(1);
  EXPECT_EQ(core.next_event(1), 8u);  // preload finishes at 8
}

}  // namespace
}  // namespace npusim
