int a_api(int x);

int b_api(int x) { return a_api(x) * 2; }
