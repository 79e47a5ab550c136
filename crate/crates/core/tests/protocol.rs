mod common;

use common::{protocol_check, ProtocolCase};
use proptest::prelude::*;

fn case() -> impl Strategy<Value = ProtocolCase> {
    (4usize..60, 0usize..15, 3usize..12, prop::sample::select(vec![0.05, 0.2, 0.5, 0.8, 1.0]), 2usize..64, any::<u64>()).prop_flat_map(
        |(overlap, single, items, eta, batch, seed)| {
            (1..=items).prop_map(move |ratings| ProtocolCase {
                overlap,
                single,
                items,
                ratings,
                eta,
                batch,
                seed,
            })
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn split_batches_and_leakage(c in case()) {
        protocol_check(&c).map_err(TestCaseError::fail)?;
    }
}
