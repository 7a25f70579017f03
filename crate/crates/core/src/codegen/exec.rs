use std::ptr::NonNull;

use super::CodegenError;

/// A private anonymous mapping holding machine code, readable and
/// executable but never writable once constructed.
#[derive(Debug)]
pub struct ExecutableMemory {
    ptr: NonNull<u8>,
    len: usize,
}

// The mapping is immutable after construction.
unsafe impl Send for ExecutableMemory {}
unsafe impl Sync for ExecutableMemory {}

impl ExecutableMemory {
    pub fn new(code: &[u8]) -> Result<Self, CodegenError> {
        let page = unsafe { libc::sysconf(libc::_SC_PAGESIZE) }.max(4096) as usize;
        let len = code.len().max(1).div_ceil(page) * page;
        let fail = |what: &str| CodegenError::ExecutableAllocationFailed {
            reason: format!("{what}: {}", std::io::Error::last_os_error()),
        };
        // SAFETY: anonymous private mapping; no existing memory is touched.
        let raw = unsafe {
            libc::mmap(
                std::ptr::null_mut(),
                len,
                libc::PROT_READ | libc::PROT_WRITE,
                libc::MAP_PRIVATE | libc::MAP_ANONYMOUS,
                -1,
                0,
            )
        };
        if raw == libc::MAP_FAILED {
            return Err(fail("mmap"));
        }
        let ptr = NonNull::new(raw.cast::<u8>()).ok_or_else(|| fail("mmap"))?;
        // SAFETY: the mapping is at least `code.len()` bytes and writable.
        unsafe { std::ptr::copy_nonoverlapping(code.as_ptr(), ptr.as_ptr(), code.len()) };
        let mem = ExecutableMemory { ptr, len };
        // SAFETY: `ptr..ptr+len` is exactly the mapping created above.
        if unsafe { libc::mprotect(raw, len, libc::PROT_READ | libc::PROT_EXEC) } != 0 {
            return Err(fail("mprotect"));
        }
        Ok(mem)
    }

    pub fn as_ptr(&self) -> *const u8 {
        self.ptr.as_ptr()
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

impl Drop for ExecutableMemory {
    fn drop(&mut self) {
        // SAFETY: unmapping the region this value owns.
        unsafe { libc::munmap(self.ptr.as_ptr().cast(), self.len) };
    }
}
