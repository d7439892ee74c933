//! Remote function injection over emulated one-sided RDMA.
//!
//! A source process packages an ifunc's code together with a payload into a
//! self-describing frame and writes it straight into a remote, rkey-protected
//! receive buffer. The target polls that buffer, links the code against its
//! host functions, and runs it.
//!
//! - [`frame`]: the bit-exact frame format.
//! - [`transport`]: registered regions, endpoints, puts and flushes.
//! - [`vm`]: the bytecode carrier, validator, and interpreter.
//! - [`asm`]: text assembler and disassembler for packages.
//! - [`runtime`]: register, create, send, and poll ifuncs.
//! - [`packages`]: the built-in `counter` and `xor` packages.
//! - [`am`]: an active-message baseline over the same transport.
//! - [`bench`]: ping-pong and throughput harnesses.

pub mod am;
pub mod asm;
pub mod bench;
pub mod frame;
pub mod packages;
pub mod runtime;
pub mod shmem;
pub mod transport;
pub mod vm;
