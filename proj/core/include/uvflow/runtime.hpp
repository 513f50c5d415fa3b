#pragma once

namespace uvflow {

/// Process-wide allocator tuning. The tape allocates and frees many
/// medium-sized buffers per step; keeping them off mmap avoids page-fault
/// storms. Safe to call more than once.
void configure_runtime();

}  // namespace uvflow
