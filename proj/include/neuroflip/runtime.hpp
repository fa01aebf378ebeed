#pragma once

namespace neuroflip {

/// Keeps freed heap memory mapped between graph evaluations. Every batch
/// allocates and releases tens of megabytes; with glibc's default trim and
/// mmap thresholds that memory is returned to the kernel and faulted back in
/// on every step. No-op on other C libraries. Call once from main().
void tune_allocator();

}  // namespace neuroflip
