//! Byte regions that are written remotely while a local poller reads them.
//!
//! Backings are `[AtomicU8]`. Writers publish with `Release` stores and
//! readers observe signal bytes with `Acquire` loads, so a reader that sees a
//! signal written after some bytes also sees those bytes.

use std::hint;
use std::sync::atomic::{AtomicU8, Ordering};
use std::thread;
use std::time::{Duration, Instant};

use thiserror::Error;

pub trait AtomicBytes {
    fn load_byte(&self, at: usize) -> u8;
    fn store_byte(&self, at: usize, v: u8);
    fn read_into(&self, at: usize, out: &mut [u8]);
    fn write_from(&self, at: usize, data: &[u8]);
    fn to_vec(&self) -> Vec<u8>;
}

impl AtomicBytes for [AtomicU8] {
    #[inline]
    fn load_byte(&self, at: usize) -> u8 {
        self[at].load(Ordering::Acquire)
    }

    #[inline]
    fn store_byte(&self, at: usize, v: u8) {
        self[at].store(v, Ordering::Release)
    }

    fn read_into(&self, at: usize, out: &mut [u8]) {
        let n = out.len();
        for (dst, src) in out.iter_mut().zip(&self[at..at + n]) {
            *dst = src.load(Ordering::Acquire);
        }
    }

    fn write_from(&self, at: usize, data: &[u8]) {
        for (dst, &src) in self[at..at + data.len()].iter().zip(data) {
            dst.store(src, Ordering::Release);
        }
    }

    fn to_vec(&self) -> Vec<u8> {
        let mut v = vec![0u8; self.len()];
        self.read_into(0, &mut v);
        v
    }
}

pub fn zeroed(len: usize) -> Box<[AtomicU8]> {
    (0..len).map(|_| AtomicU8::new(0)).collect()
}

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
#[error("timed out waiting for memory to change")]
pub struct WaitTimeout;

const SPIN_ROUNDS: u32 = 128;
const YIELD_ROUNDS: u32 = 64;
const MAX_SLEEP: Duration = Duration::from_millis(1);

/// Waits until the byte at `offset` differs from `snapshot`.
///
/// Spins briefly, then yields, then sleeps with a doubling interval capped at
/// 1 ms. Callers re-check the condition; a return only means the byte was
/// seen to differ at some point.
pub fn wait_mem(
    region: &[AtomicU8],
    offset: usize,
    snapshot: u8,
    deadline: Option<Instant>,
) -> Result<(), WaitTimeout> {
    let changed = || region.load_byte(offset) != snapshot;
    for _ in 0..SPIN_ROUNDS {
        if changed() {
            return Ok(());
        }
        hint::spin_loop();
    }
    for _ in 0..YIELD_ROUNDS {
        if changed() {
            return Ok(());
        }
        if deadline.is_some_and(|d| Instant::now() >= d) {
            return Err(WaitTimeout);
        }
        thread::yield_now();
    }
    let mut nap = Duration::from_micros(1);
    loop {
        if changed() {
            return Ok(());
        }
        let now = Instant::now();
        let sleep = match deadline {
            Some(d) if now >= d => return Err(WaitTimeout),
            Some(d) => nap.min(d - now),
            None => nap,
        };
        thread::sleep(sleep);
        nap = (nap * 2).min(MAX_SLEEP);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    #[test]
    fn returns_immediately_when_already_different() {
        let r = zeroed(4);
        r.store_byte(2, 9);
        let t = Instant::now();
        wait_mem(&r, 2, 0, Some(Instant::now())).unwrap();
        assert!(t.elapsed() < Duration::from_millis(1));
    }

    #[test]
    fn observes_a_later_write() {
        let r: Arc<Box<[AtomicU8]>> = Arc::new(zeroed(8));
        let w = Arc::clone(&r);
        let start = Instant::now();
        let h = thread::spawn(move || {
            thread::sleep(Duration::from_millis(10));
            w.store_byte(5, 1);
        });
        wait_mem(&r, 5, 0, Some(start + Duration::from_secs(5))).unwrap();
        let elapsed = start.elapsed();
        h.join().unwrap();
        assert!(elapsed >= Duration::from_millis(10));
        assert!(elapsed < Duration::from_millis(12), "{elapsed:?}");
    }

    #[test]
    fn deadline_expires() {
        let r = zeroed(1);
        let start = Instant::now();
        let res = wait_mem(&r, 0, 0, Some(start + Duration::from_millis(50)));
        let elapsed = start.elapsed();
        assert_eq!(res, Err(WaitTimeout));
        assert!(elapsed >= Duration::from_millis(50), "{elapsed:?}");
        assert!(elapsed < Duration::from_millis(60), "{elapsed:?}");
    }
}
