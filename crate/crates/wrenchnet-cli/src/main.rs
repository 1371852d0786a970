fn main() {
    println!("wrenchnet");
}
