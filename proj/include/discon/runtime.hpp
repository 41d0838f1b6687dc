#pragma once

namespace discon {

// Keeps freed matrix buffers in the heap instead of returning them to the OS
// after every op; without this, page faults dominate large forward passes.
// Call once at process start.
void tune_allocator();

}  // namespace discon
