//! Frozen Shapiro-Wilk references shared by the statistics tests and the
//! acceptance run. Produced once with SciPy 1.15.3 `scipy.stats.shapiro`.
#![allow(dead_code)]

pub const NORMAL17: [f64; 17] = [
    -0.8495298575209993, -0.068614106230132, -1.600886662909334, -0.4330012302327842, 0.23502388455109754,
    -1.508355573294576, -1.1050454676244168, -0.8220979733245175, 1.5563956388636302, -0.43401583847239217,
    0.4461931707993402, -1.3812925073166307, -0.4394933057856577, -1.0469039531837439, -0.5319105538650238,
    0.3463767585450193, 0.4643512714495484,
];

pub const EXPO30: [f64; 30] = [
    0.34587103291109894, 0.15220027805392922, 1.0137467140550045, 0.6375422235579089, 0.22370344123020075,
    0.05880681292502034, 0.3257629217606809, 0.934217823589479, 1.0453080108389257, 0.16214226436632856,
    0.830088147305924, 0.18959457691824597, 0.27867016435778513, 1.9467311246876746, 1.7516768620371257,
    0.7655217965319391, 0.33867667115707223, 0.5169454855949761, 0.09137094516834342, 0.237582885211384,
    0.7479814006978592, 0.31358378443355306, 0.9447390924550177, 2.0158756209857476, 0.7901951936727024,
    0.4816550295617987, 1.065685574868335, 0.6706746354825882, 0.09553288483547386, 1.0277060908140703,
];

/// (name, sample, W, p)
pub fn shapiro_cases() -> Vec<(&'static str, Vec<f64>, f64, f64)> {
    vec![
        ("sym3", vec![-1.0, 0.0, 1.0], 1.0, 1.0),
        ("ramp10", (1..=10).map(f64::from).collect(), 0.9701646110856056, 0.8923673061902978),
        (
            "skew10",
            vec![0.1, 0.2, 0.2, 0.3, 0.5, 0.8, 1.3, 2.1, 3.4, 5.5],
            0.779733190043831,
            0.008216955375128022,
        ),
        ("normal17", NORMAL17.to_vec(), 0.9519670531006055, 0.48836566309941454),
        ("expo30", EXPO30.to_vec(), 0.8744680006649136, 0.002109576097212246),
    ]
}
