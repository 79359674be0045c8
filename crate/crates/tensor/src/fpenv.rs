//! Scoped flush-to-zero for the current thread.
//!
//! Transmittance products and saturated activations drift into the
//! subnormal range during training, where x86 floating point runs one to two
//! orders of magnitude slower. Inside a [`FlushDenormals`] scope subnormal
//! inputs and results are treated as zero. Elsewhere than x86-64 the guard
//! does nothing.

/// Sets FTZ and DAZ on creation and restores the previous mode on drop.
pub struct FlushDenormals {
    #[cfg_attr(not(target_arch = "x86_64"), allow(dead_code))]
    saved: u32,
}

#[cfg(target_arch = "x86_64")]
mod imp {
    use std::arch::asm;

    const FTZ: u32 = 1 << 15;
    const DAZ: u32 = 1 << 6;

    pub fn read() -> u32 {
        let mut csr: u32 = 0;
        // SAFETY: stmxcsr stores the 32-bit SSE control word to the pointed-to slot.
        unsafe { asm!("stmxcsr [{}]", in(reg) &mut csr, options(nostack, preserves_flags)) };
        csr
    }

    pub fn write(csr: u32) {
        // SAFETY: ldmxcsr loads a control word previously read or derived from
        // stmxcsr; only the FTZ and DAZ bits are changed.
        unsafe { asm!("ldmxcsr [{}]", in(reg) &csr, options(nostack, readonly, preserves_flags)) };
    }

    pub fn enable() -> u32 {
        let saved = read();
        write(saved | FTZ | DAZ);
        saved
    }
}

impl FlushDenormals {
    pub fn new() -> Self {
        #[cfg(target_arch = "x86_64")]
        return Self { saved: imp::enable() };
        #[cfg(not(target_arch = "x86_64"))]
        Self { saved: 0 }
    }
}

impl Default for FlushDenormals {
    fn default() -> Self {
        Self::new()
    }
}

impl Drop for FlushDenormals {
    fn drop(&mut self) {
        #[cfg(target_arch = "x86_64")]
        imp::write(self.saved);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    #[cfg(target_arch = "x86_64")]
    fn subnormals_flush_inside_the_scope_only() {
        use std::hint::black_box;
        let halve = || black_box(black_box(f32::MIN_POSITIVE) * black_box(0.5f32));
        assert!(halve() > 0.0);
        {
            let _guard = FlushDenormals::new();
            assert_eq!(halve(), 0.0);
        }
        assert!(halve() > 0.0);
    }
}
