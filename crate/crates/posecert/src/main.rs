fn main() {
    println!("posecert CLI: not wired up yet");
}
