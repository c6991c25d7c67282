//! Process-level tuning.

/// Keeps freed activation buffers inside the heap instead of returning them
/// to the kernel after every layer. Large per-step allocations otherwise
/// pay for fresh zeroed pages each time. No-op off glibc.
pub fn tune_allocator() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    unsafe {
        libc::mallopt(libc::M_MMAP_THRESHOLD, 32 << 20);
        libc::mallopt(libc::M_TRIM_THRESHOLD, i32::MAX);
    }
}
