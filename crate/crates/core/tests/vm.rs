mod common;

use common::oracle::{self, Fault, Op, LOCALS, MEM};
use ifrm::vm::{
    bind_imports, exec_function, parse_code_unit, validate_code_unit, ArgsAccess, ByteMem, CodeUnit, HostTable, Trap,
    ValidCodeUnit, VmLimits,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn run(
    code: Vec<u8>,
    payload: &mut [u8],
    args: &mut [u8],
    access: ArgsAccess,
    limits: &VmLimits,
) -> (Result<Option<i64>, Trap>, u64) {
    let unit = ValidCodeUnit::new(CodeUnit { imports: vec![], n_locals: LOCALS, code }).expect("valid");
    let bound = bind_imports(&unit, &HostTable::empty()).unwrap();
    let e = exec_function(&bound, &mut ByteMem(payload), &mut ByteMem(args), access, limits);
    (e.outcome, e.fuel_used)
}

fn fault(t: &Trap) -> Option<Fault> {
    match t {
        Trap::DivByZero => Some(Fault::DivByZero),
        Trap::OobPayload => Some(Fault::OobPayload),
        Trap::OobArgs => Some(Fault::OobArgs),
        _ => None,
    }
}

/// Runs `ops` under the interpreter inside canary-framed regions and checks
/// the result against the reference evaluator.
fn agree(ops: &[Op], payload: [u8; MEM], args: [u8; MEM]) -> Result<(), String> {
    let want = oracle::eval(ops, payload, args);
    let mut p = [0xEEu8; MEM + 32];
    let mut a = [0xEEu8; MEM + 32];
    p[16..16 + MEM].copy_from_slice(&payload);
    a[16..16 + MEM].copy_from_slice(&args);
    let (got, _) = run(
        oracle::encode(ops),
        &mut p[16..16 + MEM],
        &mut a[16..16 + MEM],
        ArgsAccess::ReadWrite,
        &VmLimits::default(),
    );
    let got = got.map_err(|t| fault(&t).ok_or(format!("unexpected trap {t:?}")));
    let got = match got {
        Ok(v) => Ok(v),
        Err(Ok(f)) => Err(f),
        Err(Err(msg)) => return Err(msg),
    };
    if got != want.result {
        return Err(format!("result {got:?}, reference {:?}", want.result));
    }
    if p[16..16 + MEM] != want.payload || a[16..16 + MEM] != want.args {
        return Err("memory differs from reference".into());
    }
    let canary = |b: &[u8]| b[..16].iter().chain(&b[16 + MEM..]).all(|&x| x == 0xEE);
    if !canary(&p) || !canary(&a) {
        return Err("canary overwritten".into());
    }
    Ok(())
}

proptest! {
    #[test]
    fn interpreter_matches_reference(seed: u64, payload: [u8; MEM], args: [u8; MEM]) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ops = oracle::program(&mut rng, 48);
        prop_assert_eq!(agree(&ops, payload, args), Ok(()), "{:?}", ops);
    }

    #[test]
    fn validator_never_panics(code in proptest::collection::vec(any::<u8>(), 0..200), n_locals: u8) {
        let unit = CodeUnit { imports: vec![], n_locals, code: code.clone() };
        let _ = validate_code_unit(&unit);
        let _ = parse_code_unit(&code);
    }

    #[test]
    fn validated_random_code_stays_in_bounds(code in proptest::collection::vec(any::<u8>(), 0..64)) {
        let unit = CodeUnit { imports: vec![], n_locals: 2, code };
        if let Ok(v) = ValidCodeUnit::new(unit) {
            let b = bind_imports(&v, &HostTable::empty()).unwrap();
            let mut p = [0u8; 8];
            let mut a = [0u8; 8];
            let limits = VmLimits { fuel: 2000, ..Default::default() };
            let e = exec_function(&b, &mut ByteMem(&mut p), &mut ByteMem(&mut a), ArgsAccess::ReadWrite, &limits);
            prop_assert!(e.fuel_used <= 2000);
        }
    }

    #[test]
    fn loops_trap_at_exactly_the_budget(fuel in 1u64..20_000, pad in 0usize..6) {
        // local_get/local_set pairs, then a jump back to the start
        let mut code = Vec::new();
        for _ in 0..pad {
            code.extend_from_slice(&[0x20, 0, 0x21, 0]);
        }
        let back = -((code.len() + 5) as i32);
        code.push(0x40);
        code.extend_from_slice(&back.to_le_bytes());
        let limits = VmLimits { fuel, ..Default::default() };
        let (r, used) = run(code, &mut [], &mut [], ArgsAccess::ReadWrite, &limits);
        prop_assert_eq!(r, Err(Trap::FuelExhausted));
        prop_assert_eq!(used, fuel);
    }

    #[test]
    fn execution_is_deterministic(seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let code = oracle::encode(&oracle::program(&mut rng, 32));
        let go = || {
            let mut p = [7u8; MEM];
            let mut a = [9u8; MEM];
            let r = run(code.clone(), &mut p, &mut a, ArgsAccess::ReadWrite, &VmLimits::default());
            (r, p, a)
        };
        prop_assert_eq!(go(), go());
    }
}

#[test]
fn source_entries_may_not_write_args() {
    for op in [0x36u8, 0x37] {
        let mut code = vec![0x01];
        code.extend_from_slice(&5i64.to_le_bytes());
        code.push(0x01);
        code.extend_from_slice(&0i64.to_le_bytes());
        code.extend_from_slice(&[op, 0x51]);
        let mut args = [0u8; 16];
        let (r, _) = run(code.clone(), &mut [], &mut args, ArgsAccess::ReadOnly, &VmLimits::default());
        assert_eq!(r, Err(Trap::ArgsReadOnly));
        assert_eq!(args, [0; 16]);
        let (r, _) = run(code, &mut [], &mut args, ArgsAccess::ReadWrite, &VmLimits::default());
        assert_eq!(r, Ok(None));
        assert_eq!(args[0], 5);
    }
}

#[test]
fn reference_evaluator_sanity() {
    let r = |ops: &[Op]| oracle::eval(ops, [0; MEM], [0; MEM]).result;
    assert_eq!(r(&[Op::Push(2), Op::Push(3), Op::Bin(0x11)]), Ok(Some(-1)));
    assert_eq!(r(&[Op::Push(i64::MIN), Op::Push(-1), Op::Bin(0x13)]), Ok(Some(i64::MIN)));
    assert_eq!(r(&[Op::Push(-1), Op::Push(63), Op::Bin(0x19)]), Ok(Some(1)));
    assert_eq!(r(&[Op::Push(1), Op::Push(64), Op::Bin(0x18)]), Ok(Some(1)));
    assert_eq!(r(&[Op::Push(1), Op::Push(0), Op::Bin(0x14)]), Err(Fault::DivByZero));
    assert_eq!(r(&[Op::Push(0), Op::Push(9), Op::Mem(0x31)]), Err(Fault::OobPayload));
    assert_eq!(r(&[Op::Get(1)]), Ok(Some(MEM as i64)));
    assert_eq!(r(&[]), Ok(None));
}
