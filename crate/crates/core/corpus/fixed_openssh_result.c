int auth_password(struct ssh *ssh, const char *password) {
    Authctxt *authctxt = ssh->authctxt;
    unsigned int result = 0;

    if (sys_auth_passwd(ssh, password))
        result = 0xa5c3f00f;
    if (result == 0xa5c3f00f && authctxt->valid)
        return 1;
    return 0;
}
