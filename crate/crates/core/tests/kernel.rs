use batchtune::livenet::SyntheticKernel;

#[test]
fn compute_kernel_step_time_is_linear_in_batch() {
    let mut k = SyntheticKernel::new(20_000);
    let sizes: Vec<f64> = (1..=8).map(|i| (i * 25) as f64).collect();
    // Sizes are visited round-robin so slow stretches of a shared host hit
    // all of them alike; the median repeat stands for each size.
    let mut runs = vec![Vec::new(); sizes.len()];
    for _ in 0..31 {
        for (r, &b) in runs.iter_mut().zip(&sizes) {
            r.push(k.run_batch(b as u32).wall_secs);
        }
    }
    let times: Vec<f64> = runs
        .into_iter()
        .map(|mut r| {
            r.sort_by(f64::total_cmp);
            r[r.len() / 2]
        })
        .collect();
    let n = sizes.len() as f64;
    let mx = sizes.iter().sum::<f64>() / n;
    let my = times.iter().sum::<f64>() / n;
    let sxy: f64 = sizes.iter().zip(&times).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = sizes.iter().map(|x| (x - mx).powi(2)).sum();
    let syy: f64 = times.iter().map(|y| (y - my).powi(2)).sum();
    let r2 = sxy * sxy / (sxx * syy);
    assert!(r2 > 0.99, "r^2 = {r2}, times {times:?}");
}
