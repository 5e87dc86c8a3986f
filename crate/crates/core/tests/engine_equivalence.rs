mod common;

use common::{random_case, random_module, rng};
use shiftquant::nnops::{
    run_unified_module_float, run_unified_module_int, run_unified_module_int_with_shifts,
    FusionCase, ModuleShifts,
};

#[test]
fn integer_matches_emulation_on_random_modules() {
    let mut r = rng(11);
    for i in 0..400 {
        let case = FusionCase::ALL[i % 4];
        let m = random_module(&mut r, case);
        let int = run_unified_module_int(m.case, &m.x, &m.conv, m.shortcut.as_ref(), m.out);
        let emu = run_unified_module_float(m.case, &m.x, &m.conv, m.shortcut.as_ref(), m.out);
        match (int, emu) {
            (Ok(a), Ok(b)) => assert_eq!(a, b, "instance {i} ({case:?})"),
            (a, b) => panic!("instance {i}: int {a:?} vs emulated {b:?}"),
        }
    }
}

#[test]
fn shifts_alone_drive_integer_execution() {
    let mut r = rng(12);
    for _ in 0..100 {
        let case = random_case(&mut r);
        let m = random_module(&mut r, case);
        let shifts = ModuleShifts::from_frac_bits(
            m.x.frac_bits(),
            m.conv.weight.frac_bits(),
            m.conv.bias.frac_bits(),
            m.shortcut.as_ref().map(|s| s.frac_bits()),
            m.out.frac_bits,
        );
        let a = run_unified_module_int(m.case, &m.x, &m.conv, m.shortcut.as_ref(), m.out).unwrap();
        let b = run_unified_module_int_with_shifts(
            m.case,
            &m.x,
            &m.conv,
            m.shortcut.as_ref(),
            shifts,
            m.out,
        )
        .unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn relu_cases_produce_unsigned_outputs() {
    let mut r = rng(13);
    for case in [FusionCase::ConvRelu, FusionCase::ResidualRelu] {
        for _ in 0..50 {
            let m = random_module(&mut r, case);
            let y =
                run_unified_module_int(case, &m.x, &m.conv, m.shortcut.as_ref(), m.out).unwrap();
            assert!(!y.params().signed);
            assert!(y.ints().data().iter().all(|&v| v >= 0));
        }
    }
}
