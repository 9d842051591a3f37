//! Paired-run concurrency. SPSA's two perturbation evaluations and the
//! baseline/with-AV comparison are independent simulations; they run on two
//! threads unless `CORRIDOR_CALIB_THREADS` caps concurrency at 1.

/// Environment variable capping concurrent simulation runs.
pub const THREADS_ENV: &str = "CORRIDOR_CALIB_THREADS";

fn pair_allowed() -> bool {
    match std::env::var(THREADS_ENV) {
        Ok(v) => v.trim().parse::<usize>().map_or(true, |n| n >= 2),
        Err(_) => true,
    }
}

/// Run two independent closures, concurrently when permitted. Results come
/// back in argument order either way.
pub fn run_pair<A, B, FA, FB>(fa: FA, fb: FB) -> (A, B)
where
    A: Send,
    B: Send,
    FA: FnOnce() -> A + Send,
    FB: FnOnce() -> B + Send,
{
    if pair_allowed() {
        std::thread::scope(|scope| {
            let hb = scope.spawn(fb);
            let a = fa();
            (a, hb.join().expect("paired run panicked"))
        })
    } else {
        (fa(), fb())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pair_returns_in_order() {
        let (a, b) = run_pair(|| 1 + 1, || "x".to_string());
        assert_eq!(a, 2);
        assert_eq!(b, "x");
    }
}
