#pragma once

#include <cstdint>

#include "npusim/common.h"

namespace npusim {

enum class RowOutcome : uint8_t { kUnknown, kHit, kClosed, kConflict };

struct MemoryRequest {
  uint64_t id = 0;  // unique across the run: core id in the high bits
  Addr addr = 0;
  bool is_write = false;
  uint32_t bytes = 64;
  uint32_t core_id = 0;
  uint64_t tile_id = 0;
  uint32_t instr_index = 0;
  uint32_t channel = 0;

  Cycle issued_cycle = 0;  // core clock
  Cycle completed_cycle = kNever;

  // Controller-side bookkeeping, DRAM clock.
  uint64_t dram_arrival = 0;
  uint64_t dram_column_cycle = 0;
  uint64_t dram_done = 0;
  RowOutcome row_outcome = RowOutcome::kUnknown;
};

}  // namespace npusim
