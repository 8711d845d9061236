mod common;

use common::{primitives, relative_error, FD_TOL, INSTANCES};

fn check(name: &str) {
    let (_, make) = primitives().into_iter().find(|(n, _)| *n == name).unwrap();
    for seed in 0..INSTANCES {
        let err = relative_error(&make(seed), seed).unwrap();
        assert!(err <= FD_TOL, "{name} instance {seed}: relative error {err:.2e}");
    }
}

macro_rules! gradcheck {
    ($($name:ident),* $(,)?) => {
        $(
            #[test]
            fn $name() {
                check(stringify!($name));
            }
        )*
    };
}

gradcheck!(
    conv2d,
    conv2d_depthwise,
    relu6,
    batch_norm_train,
    batch_norm_eval,
    add,
    mul,
    scale,
    sum,
    weighted_sum,
    channel_scale,
    softmax,
    matvec_const,
    dot,
    linear,
    global_avg_pool,
    cross_entropy,
    pad_channels,
);

#[test]
fn every_primitive_is_listed() {
    assert_eq!(primitives().len(), 18);
}
